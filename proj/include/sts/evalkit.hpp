// SPDX-License-Identifier: Apache-2.0

#pragma once

// Experiments: synthetic corpora, the planted draft/target pair, mask recall,
// oracle prunable ratio and perplexity-vs-budget curves.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sts/headmap.hpp"
#include "sts/model.hpp"
#include "sts/sparsity.hpp"
#include "sts/specdec.hpp"
#include "sts/tracestore.hpp"

namespace sts {

// Token streams with a fixed successor table: with probability repeat_prob the
// next token is succ[prev], otherwise uniform.
struct CorpusSpec {
    std::uint64_t seed = 0;
    std::size_t samples = 8;
    std::size_t length = 64;
    double repeat_prob = 0.75;
};

inline void to_json(nlohmann::json& j, const CorpusSpec& c) {
    j = {{"seed", c.seed}, {"samples", c.samples}, {"length", c.length}, {"repeat_prob", c.repeat_prob}};
}

inline void from_json(const nlohmann::json& j, CorpusSpec& c) {
    c = CorpusSpec{};
    c.seed = j.value("seed", c.seed);
    c.samples = j.value("samples", c.samples);
    c.length = j.value("length", c.length);
    c.repeat_prob = j.value("repeat_prob", c.repeat_prob);
}

using Corpus = std::vector<std::vector<TokenId>>;

inline Corpus synthetic_corpus(const CorpusSpec& spec, std::size_t vocab) {
    if (spec.samples < 1 || spec.length < 2) throw ConfigError("corpus needs samples >= 1 and length >= 2");
    if (!(spec.repeat_prob >= 0.0 && spec.repeat_prob <= 1.0)) throw ConfigError("corpus repeat_prob must lie in [0, 1]");
    if (vocab < 2) throw ConfigError("corpus vocab must be >= 2");
    NormalStream rng(spec.seed);
    std::vector<TokenId> succ(vocab);
    std::iota(succ.begin(), succ.end(), TokenId{0});
    for (std::size_t i = vocab - 1; i > 0; --i) std::swap(succ[i], succ[rng.bits() % (i + 1)]);
    Corpus out(spec.samples, std::vector<TokenId>(spec.length));
    for (auto& s : out) {
        s[0] = static_cast<TokenId>(rng.bits() % vocab);
        for (std::size_t t = 1; t < s.size(); ++t)
            s[t] = rng.uniform() < spec.repeat_prob ? succ[s[t - 1]] : static_cast<TokenId>(rng.bits() % vocab);
    }
    return out;
}

// JSON array of token arrays.
inline Corpus load_token_file(const std::filesystem::path& path, std::size_t vocab) {
    const auto j = io::read_json(path);
    Corpus out;
    try {
        out = j.get<Corpus>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": expected an array of token arrays (" + e.what() + ")");
    }
    if (out.empty()) throw InputError(path.string() + ": no samples");
    for (std::size_t s = 0; s < out.size(); ++s)
        for (TokenId t : out[s])
            if (t >= vocab)
                throw InputError(path.string() + ": sample " + std::to_string(s) + " has token " + std::to_string(t) +
                                 " outside vocab " + std::to_string(vocab));
    return out;
}

struct PlantedPairConfig {
    ModelConfig target;
    std::size_t draft_layers = 1;
    double perturbation = 0.05;  // noise std on copied Q/K, relative to the init scale
    double residual_gain = 1.0;  // scales attention-out and MLP-down in both models
};

inline void to_json(nlohmann::json& j, const PlantedPairConfig& c) {
    j = {{"target", c.target},
         {"draft_layers", c.draft_layers},
         {"perturbation", c.perturbation},
         {"residual_gain", c.residual_gain}};
}

struct PlantedPair {
    ModelWeights draft;
    ModelWeights target;
    HeadTable<HeadId> source;  // draft head -> target head its Q/K came from
};

// Target first; the draft shares vocab, width and embeddings, has fewer layers,
// and each draft head carries a perturbed copy of one target head's Q/K.
inline PlantedPair planted_pair(const PlantedPairConfig& pc) {
    const ModelConfig& tc = pc.target;
    if (pc.draft_layers < 1 || pc.draft_layers > tc.layers)
        throw ConfigError("planted pair: draft_layers must lie in [1, target layers]");
    if (pc.perturbation < 0.0 || pc.residual_gain <= 0.0)
        throw ConfigError("planted pair: perturbation must be >= 0 and residual_gain > 0");
    ModelConfig dc = tc;
    dc.layers = pc.draft_layers;
    dc.seed = tc.seed + 1;

    PlantedPair pp{init_model(dc), init_model(tc), HeadTable<HeadId>(dc.layers, dc.heads)};
    for (ModelWeights* m : {&pp.draft, &pp.target})
        for (auto& lw : m->layers) {
            for (float& x : lw.wo.data()) x = static_cast<float>(x * pc.residual_gain);
            for (float& x : lw.w_down.data()) x = static_cast<float>(x * pc.residual_gain);
        }
    pp.draft.token_embedding = pp.target.token_embedding;
    pp.draft.position_embedding = pp.target.position_embedding;

    NormalStream rng(tc.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(tc.layers * tc.heads);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.bits() % (i + 1)]);

    const std::size_t d = tc.head_dim, hidden = tc.hidden();
    const double noise = pc.perturbation / std::sqrt(static_cast<double>(hidden));
    for (std::size_t i = 0; i < pp.source.size(); ++i) {
        const HeadId dh = pp.source.id_of(i);
        const HeadId th{order[i % order.size()] / tc.heads, order[i % order.size()] % tc.heads};
        pp.source.at(dh) = th;
        const LayerWeights& src = pp.target.layers[th.layer];
        LayerWeights& dst = pp.draft.layers[dh.layer];
        for (std::size_t r = 0; r < hidden; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                dst.wq(r, dh.head * d + c) = static_cast<float>(src.wq(r, th.head * d + c) + noise * rng.next());
                dst.wk(r, dh.head * d + c) = static_cast<float>(src.wk(r, th.head * d + c) + noise * rng.next());
            }
    }
    return pp;
}

// ---- mask recall ----

struct RecallOptions {
    std::size_t k = 8;
    std::size_t page_size = 1;
    std::size_t first_position = 0;  // 0: half of each sample
};

struct RecallReport {
    double recall = 0.0;
    double random_baseline = 0.0;  // mean of min(k, ctx) / ctx over the same rows
    std::size_t rows = 0;          // (position, target head) pairs scored
    std::vector<double> per_layer;
};

// Scores each decode-position STS mask (pure top-k from the mapped draft head)
// against the target's own dense top-k at that position.
inline RecallReport mask_recall(const ModelWeights& draft, const ModelWeights& target, const HeadMapping& mapping,
                                const Corpus& corpus, const RecallOptions& opt) {
    detail::check_mapping(mapping, draft.config, target.config);
    if (opt.k < 1) throw ConfigError("recall: k must be >= 1");
    SparsityConfig sc;
    sc.budget = Budget::tokens(opt.k);
    sc.page_size = opt.page_size;
    sc.include_current = false;
    sc.validate();

    const std::size_t L = target.config.layers, H = target.config.heads;
    std::vector<double> layer_sum(L, 0.0);
    std::vector<std::size_t> layer_rows(L, 0);
    double baseline_sum = 0.0;
    RecallReport rep;
    for (const auto& toks : corpus) {
        const auto da = *forward_prefill(draft, toks, nullptr, {.attention = true}).record.attention;
        const auto ta = *forward_prefill(target, toks, nullptr, {.attention = true}).record.attention;
        const std::size_t n = toks.size();
        const std::size_t first = opt.first_position ? opt.first_position : n / 2;
        for (std::size_t t = first; t < n; ++t) {
            const std::size_t ctx = t + 1;
            const double denom = static_cast<double>(std::min(opt.k, ctx));
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t h = 0; h < H; ++h) {
                    const HeadId src = mapping.entries.at(l, h).draft;
                    const IndexSet mask = select_row(da.at(src).row(t).first(ctx), sc);
                    const IndexSet oracle = topk_indices(ta.at(l, h).row(t).first(ctx), opt.k);
                    layer_sum[l] += static_cast<double>(mask.intersection_size(oracle)) / denom;
                    ++layer_rows[l];
                    baseline_sum += denom / static_cast<double>(ctx);
                    ++rep.rows;
                }
        }
    }
    if (rep.rows == 0) throw InputError("recall: corpus has no positions to score");
    double total = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
        total += layer_sum[l];
        rep.per_layer.push_back(layer_rows[l] ? layer_sum[l] / static_cast<double>(layer_rows[l]) : 0.0);
    }
    rep.recall = total / static_cast<double>(rep.rows);
    rep.random_baseline = baseline_sum / static_cast<double>(rep.rows);
    return rep;
}

// ---- perplexity helpers ----

inline double corpus_perplexity(const ModelWeights& w, const Corpus& corpus,
                                const std::function<const PrefillMaskSet*(std::size_t)>& masks_for = {}) {
    NllSum acc;
    for (std::size_t s = 0; s < corpus.size(); ++s) {
        if (corpus[s].size() < 2) throw InputError("perplexity: sample " + std::to_string(s) + " has fewer than 2 tokens");
        const PrefillMaskSet* m = masks_for ? masks_for(s) : nullptr;
        const auto res = forward_prefill(w, corpus[s], m);
        const NllSum one = sequence_nll(res.record.logits, corpus[s]);
        acc.total += one.total;
        acc.count += one.count;
    }
    return std::exp(acc.total / static_cast<double>(acc.count));
}

// ---- oracle prunable ratio ----

struct LayerPrunability {
    std::size_t layer = 0;
    std::size_t budget = 0;  // smallest per-row budget found by the search
    double ratio = 0.0;      // 1 - budget / N
    double delta_ppl = 0.0;  // at that budget
};

struct PrunableReport {
    double threshold = 0.0;
    double dense_ppl = 0.0;
    std::size_t sequence_length = 0;
    std::vector<LayerPrunability> layers;
};

// Per layer: binary search over the uniform per-row budget k in [1, N] for the
// smallest k whose perplexity increase stays within the threshold. Masks are the
// model's own dense top-k on that layer; all other layers stay dense.
inline PrunableReport oracle_prunable_ratio(const ModelWeights& w, const Corpus& corpus, double threshold) {
    if (!(threshold >= 0.0)) throw ConfigError("oracle sparsity: threshold must be >= 0");
    if (corpus.empty()) throw InputError("oracle sparsity: empty corpus");
    const ModelConfig& cfg = w.config;
    PrunableReport rep;
    rep.threshold = threshold;
    for (const auto& s : corpus) rep.sequence_length = std::max(rep.sequence_length, s.size());
    rep.dense_ppl = corpus_perplexity(w, corpus);

    std::vector<HeadTable<Tensor2D>> dense_attn;
    for (const auto& s : corpus) dense_attn.push_back(*forward_prefill(w, s, nullptr, {.attention = true}).record.attention);

    const std::size_t N = rep.sequence_length;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        auto delta_at = [&](std::size_t k) {
            std::vector<PrefillMaskSet> masks;
            for (std::size_t s = 0; s < corpus.size(); ++s) {
                const std::size_t n = corpus[s].size();
                PrefillMaskSet m = dense_prefill_masks(cfg.layers, cfg.heads, 0, n);
                for (std::size_t h = 0; h < cfg.heads; ++h)
                    for (std::size_t r = 0; r < n; ++r)
                        m.heads.at(l, h)[r] = topk_indices(std::as_const(dense_attn[s]).at(l, h).row(r).first(r + 1), k);
                masks.push_back(std::move(m));
            }
            return corpus_perplexity(w, corpus, [&](std::size_t s) { return &masks[s]; }) - rep.dense_ppl;
        };
        std::size_t lo = 1, hi = N;  // k = N is dense, delta 0
        double at_hi = 0.0;
        while (lo < hi) {
            const std::size_t mid = lo + (hi - lo) / 2;
            const double d = delta_at(mid);
            if (d <= threshold) {
                hi = mid;
                at_hi = d;
            } else {
                lo = mid + 1;
            }
        }
        rep.layers.push_back({l, hi, 1.0 - static_cast<double>(hi) / static_cast<double>(N), at_hi});
    }
    return rep;
}

// ---- perplexity vs budget ----

struct PplRow {
    std::size_t budget = 0;
    SparsityScope scope = SparsityScope::DecodeOnly;
    double ppl = 0.0;
    double delta_ppl = 0.0;
};

struct PplCurve {
    double dense_ppl = 0.0;
    std::vector<PplRow> rows;
};

// STS-D masks the generated half of each sample (rows >= N/2) and keeps the
// prompt half dense; STS-PD masks every row. Masks come from the draft's
// attention over the same tokens, remapped through `mapping`.
inline PplCurve ppl_vs_budget(const ModelWeights& draft, const ModelWeights& target, const HeadMapping& mapping,
                              const Corpus& corpus, const std::vector<std::size_t>& budgets,
                              const std::vector<SparsityScope>& scopes, SparsityConfig base = {}) {
    detail::check_mapping(mapping, draft.config, target.config);
    if (budgets.empty() || scopes.empty()) throw ConfigError("ppl curve: budget sweep and scope list must be non-empty");
    if (!std::is_sorted(budgets.begin(), budgets.end())) throw ConfigError("ppl curve: budget sweep must be ascending");
    for (std::size_t b : budgets)
        if (b < 1) throw ConfigError("ppl curve: budgets must be >= 1");

    PplCurve curve;
    curve.dense_ppl = corpus_perplexity(target, corpus);
    std::vector<HeadTable<Tensor2D>> draft_attn;
    for (const auto& s : corpus) draft_attn.push_back(*forward_prefill(draft, s, nullptr, {.attention = true}).record.attention);

    for (std::size_t b : budgets) {
        base.budget = Budget::tokens(b);
        for (SparsityScope scope : scopes) {
            std::vector<PrefillMaskSet> masks;
            for (std::size_t s = 0; s < corpus.size(); ++s) {
                const std::size_t n = corpus[s].size();
                PrefillMaskSet m = remap_prefill_masks(draft_masks_prefill(draft_attn[s], 0, base), 0, mapping);
                if (scope == SparsityScope::DecodeOnly)
                    for (auto& rows : m.heads)
                        for (std::size_t r = 0; r < n / 2; ++r) rows[r] = IndexSet::range(0, r + 1);
                masks.push_back(std::move(m));
            }
            const double ppl = corpus_perplexity(target, corpus, [&](std::size_t s) { return &masks[s]; });
            curve.rows.push_back({b, scope, ppl, ppl - curve.dense_ppl});
        }
    }
    return curve;
}

}  // namespace sts
