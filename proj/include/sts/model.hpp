// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sts/attention.hpp"
#include "sts/error.hpp"
#include "sts/head.hpp"
#include "sts/kv_cache.hpp"
#include "sts/numkit.hpp"

namespace sts {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t head_dim = 8;
    std::size_t vocab = 64;
    std::size_t mlp_ratio = 4;
    std::size_t max_seq = 128;
    std::size_t page_size = 1;
    std::uint64_t seed = 0;

    std::size_t hidden() const noexcept { return heads * head_dim; }

    void validate() const {
        if (layers < 1 || heads < 1 || head_dim < 1 || vocab < 1 || mlp_ratio < 1 || max_seq < 1 || page_size < 1)
            throw ConfigError("model config: layers, heads, head_dim, vocab, mlp_ratio, max_seq and page_size must all be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"layers", c.layers},   {"heads", c.heads},       {"head_dim", c.head_dim},
                       {"vocab", c.vocab},     {"mlp_ratio", c.mlp_ratio}, {"max_seq", c.max_seq},
                       {"page_size", c.page_size}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.layers = j.value("layers", d.layers);
    c.heads = j.value("heads", d.heads);
    c.head_dim = j.value("head_dim", d.head_dim);
    c.vocab = j.value("vocab", d.vocab);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.max_seq = j.value("max_seq", d.max_seq);
    c.page_size = j.value("page_size", d.page_size);
    c.seed = j.value("seed", d.seed);
}

struct LayerWeights {
    std::vector<float> attn_norm;
    Tensor2D wq, wk, wv, wo;  // hidden x hidden; head h owns columns [h*d, (h+1)*d)
    std::vector<float> mlp_norm;
    Tensor2D w_up;    // hidden x (mlp_ratio*hidden)
    Tensor2D w_down;  // (mlp_ratio*hidden) x hidden

    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    ModelConfig config;
    Tensor2D token_embedding;     // vocab x hidden
    Tensor2D position_embedding;  // max_seq x hidden
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;
    Tensor2D lm_head;  // hidden x vocab

    bool operator==(const ModelWeights&) const = default;
};

namespace detail {

inline Tensor2D normal_matrix(NormalStream& rng, std::size_t rows, std::size_t cols, double scale) {
    Tensor2D m(rows, cols);
    for (float& x : m.data()) x = static_cast<float>(rng.next() * scale);
    return m;
}

}  // namespace detail

// Pre-norm decoder with learned absolute positions, ReLU MLP and an untied LM head.
// Embeddings are unit-normal; every projection is scaled by 1/sqrt(hidden).
inline ModelWeights init_model(const ModelConfig& config) {
    config.validate();
    NormalStream rng(config.seed);
    const std::size_t h = config.hidden();
    const double proj = 1.0 / std::sqrt(static_cast<double>(h));

    ModelWeights w;
    w.config = config;
    w.token_embedding = detail::normal_matrix(rng, config.vocab, h, 1.0);
    w.position_embedding = detail::normal_matrix(rng, config.max_seq, h, 1.0);
    w.layers.resize(config.layers);
    for (auto& layer : w.layers) {
        layer.attn_norm.assign(h, 1.0f);
        layer.wq = detail::normal_matrix(rng, h, h, proj);
        layer.wk = detail::normal_matrix(rng, h, h, proj);
        layer.wv = detail::normal_matrix(rng, h, h, proj);
        layer.wo = detail::normal_matrix(rng, h, h, proj);
        layer.mlp_norm.assign(h, 1.0f);
        layer.w_up = detail::normal_matrix(rng, h, config.mlp_ratio * h, proj);
        layer.w_down = detail::normal_matrix(rng, config.mlp_ratio * h, h, proj);
    }
    w.final_norm.assign(h, 1.0f);
    w.lm_head = detail::normal_matrix(rng, h, config.vocab, proj);
    return w;
}

struct RecordFlags {
    bool attention = false;  // post-softmax weights actually used
    bool scores = false;     // dense scaled q.k scores over the causal prefix
};

struct ForwardRecord {
    Tensor2D logits;  // one row per processed token
    // rows = processed tokens, cols = cache length after the pass
    std::optional<HeadTable<Tensor2D>> attention;
    std::optional<HeadTable<Tensor2D>> scores;
};

struct PrefillResult {
    ForwardRecord record;
    PagedKVCache cache;
};

inline PagedKVCache make_cache(const ModelConfig& c) {
    return PagedKVCache(c.layers, c.heads, c.head_dim, c.page_size, c.max_seq);
}

namespace detail {

inline void rms_norm_rows(const Tensor2D& x, std::span<const float> scale, Tensor2D& out) {
    out = Tensor2D(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto in = x.row(r);
        double ss = 0.0;
        for (float v : in) ss += static_cast<double>(v) * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(in.size()) + 1e-6);
        auto o = out.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) o[c] = static_cast<float>(in[c] * inv * scale[c]);
    }
}

inline void add_into(Tensor2D& x, const Tensor2D& delta) {
    auto xs = x.data();
    const auto ds = delta.data();
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += ds[i];
}

}  // namespace detail

// Processes `tokens` on top of `cache` (which must hold the preceding context) and
// appends their keys/values. With `masks`, each (head, row) softmax is restricted to
// the given index set; masks->first_row must equal the cache length before the call.
inline ForwardRecord forward_block(const ModelWeights& w, std::span<const TokenId> tokens, PagedKVCache& cache,
                                   const PrefillMaskSet* masks = nullptr, RecordFlags record = {}) {
    const ModelConfig& cfg = w.config;
    const std::size_t n = tokens.size();
    const std::size_t start = cache.length();
    STS_EXPECTS(n >= 1, "forward: empty token block");
    if (start + n > cfg.max_seq)
        throw CapacityError("sequence length " + std::to_string(start + n) + " exceeds max_seq " +
                            std::to_string(cfg.max_seq));
    for (std::size_t i = 0; i < n; ++i)
        if (tokens[i] >= cfg.vocab)
            throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(start + i) +
                             " is outside vocab of size " + std::to_string(cfg.vocab));
    if (masks) {
        STS_EXPECTS(masks->first_row == start, "forward: mask rows start at " + std::to_string(masks->first_row) +
                                                   " but block starts at " + std::to_string(start));
        STS_EXPECTS(masks->heads.layers() == cfg.layers && masks->heads.heads() == cfg.heads,
                    "forward: mask table does not cover every (layer, head)");
        for (std::size_t flat = 0; flat < masks->heads.size(); ++flat) {
            const HeadId id = masks->heads.id_of(flat);
            const auto& rows = masks->heads.at(id);
            STS_EXPECTS(rows.size() == n, "forward: mask for head " + id.str() + " covers " +
                                              std::to_string(rows.size()) + " rows, expected " + std::to_string(n));
            for (std::size_t r = 0; r < n; ++r) {
                STS_EXPECTS(!rows[r].empty(), "forward: empty mask for head " + id.str());
                STS_EXPECTS(rows[r].bounded_by(start + r + 1), "forward: non-causal mask index for head " + id.str() +
                                                                   " at row " + std::to_string(start + r));
            }
        }
    }

    const std::size_t hidden = cfg.hidden();
    const std::size_t d = cfg.head_dim;
    const std::size_t total = start + n;

    ForwardRecord rec;
    if (record.attention) rec.attention.emplace(cfg.layers, cfg.heads, Tensor2D(n, total));
    if (record.scores) rec.scores.emplace(cfg.layers, cfg.heads, Tensor2D(n, total));

    Tensor2D x(n, hidden);
    for (std::size_t r = 0; r < n; ++r) {
        const auto te = w.token_embedding.row(tokens[r]);
        const auto pe = w.position_embedding.row(start + r);
        auto xr = x.row(r);
        for (std::size_t c = 0; c < hidden; ++c) xr[c] = te[c] + pe[c];
    }

    Tensor2D normed;
    std::vector<IndexSet> dense_rows;
    if (!masks)
        for (std::size_t r = 0; r < n; ++r) dense_rows.push_back(IndexSet::range(0, start + r + 1));

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        detail::rms_norm_rows(x, lw.attn_norm, normed);
        const Tensor2D q = matmul(normed, lw.wq);
        const Tensor2D k = matmul(normed, lw.wk);
        const Tensor2D v = matmul(normed, lw.wv);

        for (std::size_t h = 0; h < cfg.heads; ++h) {
            HeadCache& hc = cache.head(l, h);
            for (std::size_t r = 0; r < n; ++r)
                hc.append(k.row(r).subspan(h * d, d), v.row(r).subspan(h * d, d));
        }

        Tensor2D attn(n, hidden);
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const HeadCache& hc = cache.head(l, h);
            for (std::size_t r = 0; r < n; ++r) {
                const std::size_t pos = start + r;
                const IndexSet& sel = masks ? masks->heads.at(l, h)[r] : dense_rows[r];
                const auto qh = q.row(r).subspan(h * d, d);
                std::span<float> wbuf;
                if (rec.attention) wbuf = rec.attention->at(l, h).row(r);
                const std::vector<float> out = sparse_attention(qh, hc, sel, wbuf.empty() ? wbuf : wbuf.first(pos + 1));
                if (rec.scores) attention_scores(qh, hc, pos + 1, rec.scores->at(l, h).row(r));
                std::copy(out.begin(), out.end(), attn.row(r).begin() + static_cast<std::ptrdiff_t>(h * d));
            }
        }
        detail::add_into(x, matmul(attn, lw.wo));

        detail::rms_norm_rows(x, lw.mlp_norm, normed);
        Tensor2D up = matmul(normed, lw.w_up);
        for (float& u : up.data()) u = u > 0.0f ? u : 0.0f;
        detail::add_into(x, matmul(up, lw.w_down));
    }

    detail::rms_norm_rows(x, w.final_norm, normed);
    rec.logits = matmul(normed, w.lm_head);
    return rec;
}

inline PrefillResult forward_prefill(const ModelWeights& w, std::span<const TokenId> tokens,
                                     const PrefillMaskSet* masks = nullptr, RecordFlags record = {}) {
    if (tokens.empty() || tokens.size() > w.config.max_seq)
        throw InputError("prefill length " + std::to_string(tokens.size()) + " must be in [1, " +
                         std::to_string(w.config.max_seq) + "]");
    PrefillResult res{{}, make_cache(w.config)};
    res.record = forward_block(w, tokens, res.cache, masks, record);
    return res;
}

// One-token step. Each masked head attends to its mask plus the current position.
inline ForwardRecord forward_decode(const ModelWeights& w, TokenId token, PagedKVCache& cache,
                                    const DecodeMaskSet* masks = nullptr, RecordFlags record = {}) {
    const std::size_t pos = cache.length();
    if (pos >= w.config.max_seq)
        throw CapacityError("KV cache is full (" + std::to_string(pos) + " of " + std::to_string(w.config.max_seq) +
                            " positions)");
    const TokenId tok[1] = {token};
    if (!masks) return forward_block(w, tok, cache, nullptr, record);

    STS_EXPECTS(masks->layers() == w.config.layers && masks->heads() == w.config.heads,
                "forward_decode: mask table does not cover every (layer, head)");
    PrefillMaskSet block{pos, HeadTable<std::vector<IndexSet>>(w.config.layers, w.config.heads)};
    const IndexSet self{pos};
    for (std::size_t flat = 0; flat < masks->size(); ++flat) {
        const HeadId id = masks->id_of(flat);
        const IndexSet& m = masks->at(id);
        STS_EXPECTS(m.bounded_by(pos + 1), "forward_decode: mask index beyond current position for head " + id.str());
        block.heads.at(id) = {m.unite(self)};
    }
    return forward_block(w, tok, cache, &block, record);
}

// Summed natural-log NLL of tokens[1..] given per-position logits rows [0..n-1).
struct NllSum {
    double total = 0.0;
    std::size_t count = 0;
};

inline NllSum sequence_nll(const Tensor2D& logits, std::span<const TokenId> tokens) {
    STS_EXPECTS(logits.rows() == tokens.size(), "sequence_nll: one logits row per token required");
    NllSum s;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        const auto row = logits.row(t);
        double mx = -INFINITY;
        for (float v : row) mx = std::max(mx, static_cast<double>(v));
        double sum = 0.0;
        for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
        const double lse = mx + std::log(sum);
        s.total += lse - static_cast<double>(row[tokens[t + 1]]);
        ++s.count;
    }
    return s;
}

inline double perplexity(const ModelWeights& w, std::span<const TokenId> tokens, const PrefillMaskSet* masks = nullptr) {
    if (tokens.size() < 2) throw InputError("perplexity needs at least 2 tokens");
    const auto res = forward_prefill(w, tokens, masks);
    const NllSum s = sequence_nll(res.record.logits, tokens);
    return std::exp(s.total / static_cast<double>(s.count));
}

inline TokenId argmax_token(std::span<const float> logits) {
    STS_EXPECTS(!logits.empty(), "argmax over empty logits");
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Target-only greedy reference: dense prefill then `max_new` dense decode steps.
inline std::vector<TokenId> greedy_decode(const ModelWeights& w, std::span<const TokenId> prompt, std::size_t max_new) {
    if (prompt.empty()) throw InputError("greedy_decode: empty prompt");
    std::vector<TokenId> out;
    if (max_new == 0) return out;
    auto pre = forward_prefill(w, prompt);
    TokenId next = argmax_token(pre.record.logits.row(prompt.size() - 1));
    out.push_back(next);
    while (out.size() < max_new) {
        const auto rec = forward_decode(w, next, pre.cache);
        next = argmax_token(rec.logits.row(0));
        out.push_back(next);
    }
    return out;
}

}  // namespace sts
