// SPDX-License-Identifier: Apache-2.0

#pragma once

// Paired draft/target attention traces and their on-disk format.
//
// A trace directory holds `manifest.json` plus one blob per (model, sample, layer).
// Each blob stores, for every head of that layer in ascending order, the lower
// triangle of the N x N attention matrix packed row-major (row t contributes
// t + 1 values), as little-endian float32. Blob bytes = heads * N(N+1)/2 * 4.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "sts/binary_io.hpp"
#include "sts/head.hpp"
#include "sts/model.hpp"

namespace sts {

inline constexpr int kTraceFormatVersion = 1;

struct TraceSample {
    std::vector<TokenId> tokens;
    HeadTable<Tensor2D> draft;   // N x N causal attention per draft head
    HeadTable<Tensor2D> target;  // N x N causal attention per target head

    std::size_t length() const noexcept { return tokens.size(); }
    bool operator==(const TraceSample&) const = default;
};

struct TraceSet {
    ModelConfig draft_config;
    ModelConfig target_config;
    std::vector<TraceSample> samples;

    bool operator==(const TraceSet&) const = default;
};

// Checks shape, causality and unit row sums of one attention matrix.
inline bool is_causal_attention(const Tensor2D& a, std::size_t n, double tol = 1e-4) {
    if (a.rows() != n || a.cols() != n) return false;
    for (std::size_t r = 0; r < n; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            const float v = a(r, c);
            if (!std::isfinite(v) || v < 0.0f) return false;
            if (c > r && v != 0.0f) return false;
            sum += v;
        }
        if (std::fabs(sum - 1.0) > tol) return false;
    }
    return true;
}

inline TraceSet collect_traces(const ModelWeights& draft, const ModelWeights& target,
                               const std::vector<std::vector<TokenId>>& samples) {
    if (samples.empty()) throw InputError("collect_traces: at least one sample is required");
    TraceSet ts{draft.config, target.config, {}};
    ts.samples.reserve(samples.size());
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const auto& toks = samples[s];
        const std::size_t limit = std::min(draft.config.max_seq, target.config.max_seq);
        if (toks.empty() || toks.size() > limit)
            throw InputError("collect_traces: sample " + std::to_string(s) + " has length " +
                             std::to_string(toks.size()) + ", allowed [1, " + std::to_string(limit) + "]");
        TraceSample ts_sample;
        ts_sample.tokens = toks;
        try {
            ts_sample.draft = *forward_prefill(draft, toks, nullptr, {.attention = true}).record.attention;
            ts_sample.target = *forward_prefill(target, toks, nullptr, {.attention = true}).record.attention;
        } catch (const InputError& e) {
            throw InputError("collect_traces: sample " + std::to_string(s) + ": " + e.what());
        }
        ts.samples.push_back(std::move(ts_sample));
    }
    return ts;
}

namespace detail {

inline std::string blob_name(const char* model, std::size_t sample, std::size_t layer) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_s%05zu_l%03zu.bin", model, sample, layer);
    return buf;
}

inline std::vector<float> pack_layer(const HeadTable<Tensor2D>& t, std::size_t layer, std::size_t n) {
    std::vector<float> out;
    out.reserve(t.heads() * n * (n + 1) / 2);
    for (std::size_t h = 0; h < t.heads(); ++h) {
        const Tensor2D& m = t.at(layer, h);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c <= r; ++c) out.push_back(m(r, c));
    }
    return out;
}

inline void unpack_layer(std::span<const float> packed, HeadTable<Tensor2D>& t, std::size_t layer, std::size_t n) {
    std::size_t i = 0;
    for (std::size_t h = 0; h < t.heads(); ++h) {
        Tensor2D m(n, n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c <= r; ++c) m(r, c) = packed[i++];
        t.at(layer, h) = std::move(m);
    }
}

}  // namespace detail

// Identifier derived from the manifest's blob checksums; stable across save/load.
inline std::string trace_set_id(const nlohmann::json& manifest) {
    std::string acc;
    for (const auto& s : manifest.at("samples"))
        for (const auto& b : s.at("blobs")) acc += b.at("crc32").get<std::string>();
    const auto* bytes = reinterpret_cast<const unsigned char*>(acc.data());
    return "ts-" + io::hex32(io::crc32_of({bytes, acc.size()}));
}

inline nlohmann::json save_traces(const TraceSet& ts, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t s = 0; s < ts.samples.size(); ++s) {
        const TraceSample& sample = ts.samples[s];
        const std::size_t n = sample.length();
        nlohmann::json blobs = nlohmann::json::array();
        auto emit = [&](const char* model, const HeadTable<Tensor2D>& table) {
            for (std::size_t l = 0; l < table.layers(); ++l) {
                const auto bytes = io::encode_f32le(detail::pack_layer(table, l, n));
                const std::string file = detail::blob_name(model, s, l);
                io::write_bytes(dir / file, bytes);
                blobs.push_back({{"model", model},
                                 {"layer", l},
                                 {"file", file},
                                 {"bytes", bytes.size()},
                                 {"crc32", io::hex32(io::crc32_of(bytes))}});
            }
        };
        emit("draft", sample.draft);
        emit("target", sample.target);
        samples.push_back({{"length", n}, {"tokens", sample.tokens}, {"blobs", blobs}});
    }
    nlohmann::json manifest{
        {"format_version", kTraceFormatVersion},
        {"layout", "per (model, sample, layer): heads ascending, lower triangle row-major packed, float32 little-endian"},
        {"draft_config", ts.draft_config},
        {"target_config", ts.target_config},
        {"samples", samples}};
    manifest["trace_set_id"] = trace_set_id(manifest);
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

inline TraceSet load_traces(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw LoadError(LoadErrorKind::Malformed, "missing trace manifest: " + manifest_path.string());
    const auto manifest = io::read_json(manifest_path);
    const int version = manifest.value("format_version", -1);
    if (version != kTraceFormatVersion)
        throw LoadError(LoadErrorKind::UnsupportedVersion,
                        "unsupported version " + std::to_string(version) + " in " + manifest_path.string());

    TraceSet ts;
    try {
        ts.draft_config = manifest.at("draft_config").get<ModelConfig>();
        ts.target_config = manifest.at("target_config").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(LoadErrorKind::Malformed, "bad model config in " + manifest_path.string() + ": " + e.what());
    }

    for (const auto& sj : manifest.at("samples")) {
        TraceSample sample;
        sample.tokens = sj.at("tokens").get<std::vector<TokenId>>();
        const std::size_t n = sj.at("length").get<std::size_t>();
        if (sample.tokens.size() != n)
            throw LoadError(LoadErrorKind::Malformed, "sample token count disagrees with its length in " +
                                                          manifest_path.string());
        sample.draft = HeadTable<Tensor2D>(ts.draft_config.layers, ts.draft_config.heads);
        sample.target = HeadTable<Tensor2D>(ts.target_config.layers, ts.target_config.heads);
        for (const auto& bj : sj.at("blobs")) {
            const std::string model = bj.at("model").get<std::string>();
            const std::string file = bj.at("file").get<std::string>();
            const std::size_t layer = bj.at("layer").get<std::size_t>();
            HeadTable<Tensor2D>* table = model == "draft" ? &sample.draft : model == "target" ? &sample.target : nullptr;
            if (!table || layer >= table->layers())
                throw LoadError(LoadErrorKind::Malformed, "unexpected blob entry for " + file);
            const std::size_t expected = table->heads() * n * (n + 1) / 2 * 4;
            const std::size_t declared = bj.at("bytes").get<std::size_t>();
            if (declared != expected)
                throw LoadError(LoadErrorKind::TruncatedBlob, "manifest declares " + std::to_string(declared) +
                                                                  " bytes for " + file + ", layout requires " +
                                                                  std::to_string(expected));
            if (!std::filesystem::exists(dir / file))
                throw LoadError(LoadErrorKind::TruncatedBlob, "missing blob " + file);
            const auto bytes = io::read_bytes(dir / file);
            if (bytes.size() != declared)
                throw LoadError(LoadErrorKind::TruncatedBlob, "blob " + file + " holds " + std::to_string(bytes.size()) +
                                                                  " bytes, manifest declares " + std::to_string(declared));
            if (io::hex32(io::crc32_of(bytes)) != bj.at("crc32").get<std::string>())
                throw LoadError(LoadErrorKind::ChecksumMismatch, "checksum mismatch in " + file);
            detail::unpack_layer(io::decode_f32le(bytes), *table, layer, n);
        }
        for (const auto* table : {&sample.draft, &sample.target})
            for (std::size_t flat = 0; flat < table->size(); ++flat)
                if (!is_causal_attention(table->at(table->id_of(flat)), n))
                    throw LoadError(LoadErrorKind::InvalidContent,
                                    "trace matrix " + table->id_of(flat).str() + " is not causal with unit row sums");
        ts.samples.push_back(std::move(sample));
    }
    return ts;
}

}  // namespace sts
