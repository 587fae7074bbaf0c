// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sts/binary_io.hpp"
#include "sts/head.hpp"
#include "sts/numkit.hpp"
#include "sts/tracestore.hpp"

namespace sts {

inline constexpr int kMappingFormatVersion = 1;

struct MappingEntry {
    HeadId draft;
    std::uint64_t score = 0;

    bool operator==(const MappingEntry&) const = default;
};

// Target head -> draft head table for one value of k. Draft heads may repeat.
struct HeadMapping {
    std::size_t k = 0;
    HeadTable<MappingEntry> entries;  // indexed by target head
    std::string trace_set_id;
    ModelConfig draft_config;
    ModelConfig target_config;

    const MappingEntry& at(HeadId target) const { return entries.at(target); }

    bool operator==(const HeadMapping&) const = default;
};

// Row t of a causal matrix -> top-k over its t+1 active entries.
inline std::vector<IndexSet> rowwise_topk_sets(const Tensor2D& attention, std::size_t k) {
    STS_EXPECTS(attention.rows() <= attention.cols(), "rowwise_topk_sets: expected a causal (rows <= cols) matrix");
    std::vector<IndexSet> out;
    out.reserve(attention.rows());
    for (std::size_t t = 0; t < attention.rows(); ++t) out.push_back(topk_indices(attention.row(t).first(t + 1), k));
    return out;
}

// Sum over rows of |target_t ∩ draft_t|.
inline std::uint64_t match_score(std::span<const IndexSet> target_sets, std::span<const IndexSet> draft_sets) {
    STS_EXPECTS(target_sets.size() == draft_sets.size(), "match_score: row count mismatch (" +
                                                             std::to_string(target_sets.size()) + " vs " +
                                                             std::to_string(draft_sets.size()) + ")");
    std::uint64_t score = 0;
    for (std::size_t r = 0; r < target_sets.size(); ++r) score += target_sets[r].intersection_size(draft_sets[r]);
    return score;
}

// For every target head, the draft head (searched over all draft layers) whose
// per-row top-k sets overlap the target's most, summed over all rows and samples.
// Ties resolve to the lexicographically smallest (layer, head).
inline HeadMapping find_head_mapping(const TraceSet& ts, std::size_t k, std::string trace_set_id = {}) {
    STS_EXPECTS(!ts.samples.empty(), "find_head_mapping: empty trace set");
    STS_EXPECTS(k >= 1, "find_head_mapping: k must be >= 1");
    const ModelConfig& dc = ts.draft_config;
    const ModelConfig& tc = ts.target_config;

    // per sample: per head, per row top-k sets
    std::vector<HeadTable<std::vector<IndexSet>>> draft_sets, target_sets;
    for (const auto& s : ts.samples) {
        HeadTable<std::vector<IndexSet>> d(dc.layers, dc.heads), t(tc.layers, tc.heads);
        for (std::size_t i = 0; i < d.size(); ++i) d.at(d.id_of(i)) = rowwise_topk_sets(s.draft.at(d.id_of(i)), k);
        for (std::size_t i = 0; i < t.size(); ++i) t.at(t.id_of(i)) = rowwise_topk_sets(s.target.at(t.id_of(i)), k);
        draft_sets.push_back(std::move(d));
        target_sets.push_back(std::move(t));
    }

    HeadMapping m{k, HeadTable<MappingEntry>(tc.layers, tc.heads), std::move(trace_set_id), dc, tc};
    for (std::size_t ti = 0; ti < m.entries.size(); ++ti) {
        const HeadId th = m.entries.id_of(ti);
        std::int64_t best_score = -1;
        HeadId best{};
        for (std::size_t di = 0; di < draft_sets.front().size(); ++di) {
            const HeadId dh = draft_sets.front().id_of(di);
            std::uint64_t score = 0;
            for (std::size_t s = 0; s < ts.samples.size(); ++s)
                score += match_score(target_sets[s].at(th), draft_sets[s].at(dh));
            if (static_cast<std::int64_t>(score) > best_score) {
                best_score = static_cast<std::int64_t>(score);
                best = dh;
            }
        }
        m.entries.at(th) = {best, static_cast<std::uint64_t>(best_score)};
    }
    return m;
}

struct LayerDistanceStats {
    double mean_abs = 0.0;
    std::size_t max_abs = 0;
    std::map<long, std::size_t> histogram;  // target layer - draft layer -> count
};

inline LayerDistanceStats layer_distance_stats(const HeadMapping& m) {
    LayerDistanceStats st;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const HeadId t = m.entries.id_of(i);
        const long diff = static_cast<long>(t.layer) - static_cast<long>(m.entries.at(t).draft.layer);
        st.histogram[diff]++;
        st.mean_abs += static_cast<double>(std::labs(diff));
        st.max_abs = std::max<std::size_t>(st.max_abs, static_cast<std::size_t>(std::labs(diff)));
    }
    if (m.entries.size()) st.mean_abs /= static_cast<double>(m.entries.size());
    return st;
}

inline nlohmann::json mapping_to_json(const HeadMapping& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const HeadId t = m.entries.id_of(i);
        const auto& e = m.entries.at(t);
        rows.push_back({t.layer, t.head, e.draft.layer, e.draft.head, e.score});
    }
    const auto st = layer_distance_stats(m);
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [d, c] : st.histogram) hist[std::to_string(d)] = c;
    return {{"format_version", kMappingFormatVersion},
            {"k", m.k},
            {"trace_set_id", m.trace_set_id},
            {"draft_config", m.draft_config},
            {"target_config", m.target_config},
            {"entries", rows},
            {"layer_distance", {{"mean_abs", st.mean_abs}, {"max_abs", st.max_abs}, {"histogram", hist}}}};
}

inline HeadMapping mapping_from_json(const nlohmann::json& j, const std::string& origin = "mapping") {
    if (j.value("format_version", -1) != kMappingFormatVersion)
        throw LoadError(LoadErrorKind::UnsupportedVersion, "unsupported version in " + origin);
    HeadMapping m;
    try {
        m.k = j.at("k").get<std::size_t>();
        m.trace_set_id = j.value("trace_set_id", std::string{});
        m.draft_config = j.at("draft_config").get<ModelConfig>();
        m.target_config = j.at("target_config").get<ModelConfig>();
        m.entries = HeadTable<MappingEntry>(m.target_config.layers, m.target_config.heads);
        std::vector<bool> seen(m.entries.size(), false);
        for (const auto& row : j.at("entries")) {
            const auto v = row.get<std::vector<std::uint64_t>>();
            if (v.size() != 5) throw LoadError(LoadErrorKind::Malformed, "mapping row must have 5 fields in " + origin);
            const HeadId t{v[0], v[1]}, d{v[2], v[3]};
            if (!m.entries.contains(t) || d.layer >= m.draft_config.layers || d.head >= m.draft_config.heads)
                throw LoadError(LoadErrorKind::Malformed, "mapping row references an unknown head in " + origin);
            m.entries.at(t) = {d, v[4]};
            seen[t.layer * m.entries.heads() + t.head] = true;
        }
        for (bool s : seen)
            if (!s) throw LoadError(LoadErrorKind::Malformed, "mapping does not cover every target head in " + origin);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(LoadErrorKind::Malformed, "malformed mapping " + origin + ": " + e.what());
    }
    return m;
}

inline void save_mapping(const HeadMapping& m, const std::filesystem::path& path) {
    io::write_text(path, mapping_to_json(m).dump(2) + "\n");
}

inline HeadMapping load_mapping(const std::filesystem::path& path) {
    return mapping_from_json(io::read_json(path), path.string());
}

// Mapping whose k is nearest to `budget`; ties go to the smaller k.
inline const HeadMapping& select_mapping(std::span<const HeadMapping> mappings, std::size_t budget) {
    STS_EXPECTS(!mappings.empty(), "select_mapping: no mappings available");
    const HeadMapping* best = &mappings[0];
    auto dist = [&](const HeadMapping& m) { return m.k > budget ? m.k - budget : budget - m.k; };
    for (const auto& m : mappings) {
        const auto dm = dist(m), db = dist(*best);
        if (dm < db || (dm == db && m.k < best->k)) best = &m;
    }
    return *best;
}

}  // namespace sts
