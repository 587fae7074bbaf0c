// SPDX-License-Identifier: Apache-2.0

#pragma once

// Draft-guided sparsity masks. Everything here consumes draft attention only; no
// function in this header accepts target-model state.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sts/attention.hpp"
#include "sts/error.hpp"
#include "sts/headmap.hpp"
#include "sts/numkit.hpp"

namespace sts {

enum class SparsityScope {
    DecodeOnly,     // STS-D: prefill stays dense
    PrefillDecode,  // STS-PD
};

inline std::string to_string(SparsityScope s) { return s == SparsityScope::DecodeOnly ? "STS-D" : "STS-PD"; }

inline SparsityScope scope_from_string(const std::string& s) {
    if (s == "STS-D" || s == "decode") return SparsityScope::DecodeOnly;
    if (s == "STS-PD" || s == "prefill+decode") return SparsityScope::PrefillDecode;
    throw ConfigError("unknown sparsity scope '" + s + "' (expected STS-D or STS-PD)");
}

// Either a fixed token count or a fraction of the row's context length.
class Budget {
public:
    static Budget tokens(std::size_t k) {
        Budget b;
        b.tokens_ = k;
        return b;
    }
    static Budget fraction(double f) {
        Budget b;
        b.fraction_ = f;
        return b;
    }

    bool is_fraction() const noexcept { return fraction_.has_value(); }
    double fraction_value() const { return fraction_.value_or(0.0); }
    std::size_t token_value() const noexcept { return tokens_; }

    // Tokens allowed for a row of `context` positions; fractions round up, minimum 1.
    std::size_t resolve(std::size_t context) const {
        if (fraction_) {
            const double t = std::ceil(*fraction_ * static_cast<double>(context) - 1e-12);
            return std::max<std::size_t>(1, static_cast<std::size_t>(std::max(0.0, t)));
        }
        return std::max<std::size_t>(1, tokens_);
    }

    void validate() const {
        if (fraction_ && !(*fraction_ > 0.0 && *fraction_ <= 1.0))
            throw ConfigError("fractional budget must lie in (0, 1]");
        if (!fraction_ && tokens_ < 1) throw ConfigError("token budget must be >= 1");
    }

    std::string describe() const {
        return fraction_ ? "fraction:" + std::to_string(*fraction_) : "tokens:" + std::to_string(tokens_);
    }

    bool operator==(const Budget&) const = default;

private:
    std::size_t tokens_ = 1;
    std::optional<double> fraction_;
};

struct SparsityConfig {
    Budget budget = Budget::tokens(8);
    std::size_t page_size = 1;  // 1 = token-wise selection
    SparsityScope scope = SparsityScope::DecodeOnly;
    // Forced extras, counted outside the budget.
    bool include_current = true;
    bool include_sink = false;
    std::size_t recent_window = 0;

    void validate() const {
        budget.validate();
        if (page_size < 1) throw ConfigError("sparsity page_size must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const SparsityConfig& c) {
    j = nlohmann::json{{"page_size", c.page_size},
                       {"scope", to_string(c.scope)},
                       {"include_current", c.include_current},
                       {"include_sink", c.include_sink},
                       {"recent_window", c.recent_window}};
    if (c.budget.is_fraction())
        j["fraction"] = c.budget.fraction_value();
    else
        j["budget"] = c.budget.token_value();
}

inline void from_json(const nlohmann::json& j, SparsityConfig& c) {
    c = SparsityConfig{};
    if (j.contains("fraction"))
        c.budget = Budget::fraction(j.at("fraction").get<double>());
    else if (j.contains("budget"))
        c.budget = Budget::tokens(j.at("budget").get<std::size_t>());
    c.page_size = j.value("page_size", c.page_size);
    if (j.contains("scope")) c.scope = scope_from_string(j.at("scope").get<std::string>());
    c.include_current = j.value("include_current", c.include_current);
    c.include_sink = j.value("include_sink", c.include_sink);
    c.recent_window = j.value("recent_window", c.recent_window);
    c.validate();
}

// Page j score = sum of token scores in [j*p_s, min((j+1)*p_s, N)).
inline std::vector<double> page_aggregate(std::span<const float> scores, std::size_t page_size) {
    STS_EXPECTS(page_size >= 1, "page_aggregate: page_size must be >= 1");
    std::vector<double> pages((scores.size() + page_size - 1) / page_size, 0.0);
    for (std::size_t i = 0; i < scores.size(); ++i) pages[i / page_size] += scores[i];
    return pages;
}

// Mask for one query row. `row` holds attention over the row's full context,
// whose last entry is the query's own position.
inline IndexSet select_row(std::span<const float> row, const SparsityConfig& cfg) {
    STS_EXPECTS(!row.empty(), "select_row: empty attention row");
    const std::size_t n = row.size();
    const std::size_t budget = cfg.budget.resolve(n);
    std::vector<std::size_t> picked;
    if (cfg.page_size == 1) {
        const IndexSet top = topk_indices(row, budget);
        picked.assign(top.begin(), top.end());
    } else {
        const auto pages = page_aggregate(row, cfg.page_size);
        const std::size_t want = (budget + cfg.page_size - 1) / cfg.page_size;
        for (std::size_t p : topk_indices(std::span<const double>(pages), want))
            for (std::size_t i = p * cfg.page_size; i < std::min(n, (p + 1) * cfg.page_size); ++i) picked.push_back(i);
    }
    if (cfg.include_current) picked.push_back(n - 1);
    if (cfg.include_sink) picked.push_back(0);
    for (std::size_t w = 0; w < std::min(cfg.recent_window, n); ++w) picked.push_back(n - 1 - w);
    return IndexSet(std::move(picked));
}

// Per draft head: one decode mask from that head's attention row.
inline HeadTable<IndexSet> draft_masks_decode(const HeadTable<std::vector<float>>& draft_rows, const SparsityConfig& cfg) {
    cfg.validate();
    HeadTable<IndexSet> out(draft_rows.layers(), draft_rows.heads());
    for (std::size_t i = 0; i < draft_rows.size(); ++i) {
        const HeadId id = draft_rows.id_of(i);
        out.at(id) = select_row(draft_rows.at(id), cfg);
    }
    return out;
}

// Per draft head: one mask per query row of a causal block. Row r of each matrix
// is the query at absolute position first_row + r; only its causal prefix is read.
inline HeadTable<std::vector<IndexSet>> draft_masks_prefill(const HeadTable<Tensor2D>& draft_attention,
                                                           std::size_t first_row, const SparsityConfig& cfg) {
    cfg.validate();
    HeadTable<std::vector<IndexSet>> out(draft_attention.layers(), draft_attention.heads());
    for (std::size_t i = 0; i < draft_attention.size(); ++i) {
        const HeadId id = draft_attention.id_of(i);
        const Tensor2D& a = draft_attention.at(id);
        STS_EXPECTS(a.cols() >= first_row + a.rows(), "draft_masks_prefill: attention matrix is not causal-shaped");
        auto& rows = out.at(id);
        rows.reserve(a.rows());
        for (std::size_t r = 0; r < a.rows(); ++r) rows.push_back(select_row(a.row(r).first(first_row + r + 1), cfg));
    }
    return out;
}

// Target head h receives its own copy of the mask of mapping[h].
template <typename Mask>
HeadTable<Mask> remap_masks(const HeadTable<Mask>& draft_masks, const HeadMapping& mapping) {
    HeadTable<Mask> out(mapping.entries.layers(), mapping.entries.heads());
    for (std::size_t i = 0; i < mapping.entries.size(); ++i) {
        const HeadId t = mapping.entries.id_of(i);
        const HeadId d = mapping.entries.at(t).draft;
        STS_EXPECTS(draft_masks.contains(d), "remap_masks: no mask for draft head " + d.str() +
                                                 " (needed by target head " + t.str() + ")");
        out.at(t) = draft_masks.at(d);
    }
    return out;
}

inline PrefillMaskSet remap_prefill_masks(const HeadTable<std::vector<IndexSet>>& draft_masks, std::size_t first_row,
                                          const HeadMapping& mapping) {
    return {first_row, remap_masks(draft_masks, mapping)};
}

// Full causal masks; the dense reference for every sparse path.
inline PrefillMaskSet dense_prefill_masks(std::size_t layers, std::size_t heads, std::size_t first_row, std::size_t rows) {
    PrefillMaskSet m{first_row, HeadTable<std::vector<IndexSet>>(layers, heads)};
    for (auto& r : m.heads)
        for (std::size_t i = 0; i < rows; ++i) r.push_back(IndexSet::range(0, first_row + i + 1));
    return m;
}

// Debug dump: one JSON document per step, head -> indices.
inline nlohmann::json mask_dump_json(const DecodeMaskSet& masks, std::size_t step) {
    nlohmann::json heads = nlohmann::json::array();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const HeadId id = masks.id_of(i);
        const auto idx = masks.at(id).indices();
        heads.push_back({{"layer", id.layer}, {"head", id.head}, {"indices", std::vector<std::size_t>(idx.begin(), idx.end())}});
    }
    return {{"step", step}, {"heads", heads}};
}

}  // namespace sts
