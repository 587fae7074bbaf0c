// SPDX-License-Identifier: Apache-2.0

#pragma once

// Greedy speculative decoding with draft-guided sparse verification.
//
// Both sessions keep their KV cache one token behind the committed sequence: the
// newest committed token is "pending" and is the first row of the next pass. A
// round therefore verifies gamma + 1 rows (pending token + gamma proposals), and
// the last row yields the bonus token when every proposal is accepted.

#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sts/headmap.hpp"
#include "sts/model.hpp"
#include "sts/sparsity.hpp"

namespace sts {

class ModelSession {
public:
    explicit ModelSession(const ModelWeights& model) : model_(&model), cache_(make_cache(model.config)) {}

    const ModelWeights& model() const noexcept { return *model_; }
    PagedKVCache& cache() noexcept { return cache_; }
    const PagedKVCache& cache() const noexcept { return cache_; }
    const std::vector<TokenId>& committed() const noexcept { return committed_; }

    void commit(std::span<const TokenId> tokens) { committed_.insert(committed_.end(), tokens.begin(), tokens.end()); }

    // Brings the cache to exactly committed[0 .. n-1): rolls back provisional
    // entries, then feeds any committed tokens it has not seen yet.
    void sync() {
        STS_EXPECTS(!committed_.empty(), "session has no committed tokens");
        const std::size_t want = committed_.size() - 1;
        cache_.truncate(want);
        if (cache_.length() < want)
            forward_block(*model_, std::span(committed_).subspan(cache_.length(), want - cache_.length()), cache_);
    }

private:
    const ModelWeights* model_;
    PagedKVCache cache_;
    std::vector<TokenId> committed_;
};

struct Proposal {
    std::size_t first_position = 0;  // position of the pending token
    std::vector<TokenId> tokens;     // gamma greedy draft tokens
    // attention_rows[i]: per draft head, the attention row of the query at
    // first_position + i (length first_position + i + 1)
    std::vector<HeadTable<std::vector<float>>> attention_rows;
};

// gamma greedy draft steps on a provisional extension of the draft cache.
inline Proposal propose(ModelSession& draft, std::size_t gamma) {
    STS_EXPECTS(gamma >= 1, "propose: gamma must be >= 1");
    draft.sync();
    const ModelWeights& w = draft.model();
    Proposal p;
    p.first_position = draft.cache().length();
    TokenId feed = draft.committed().back();
    for (std::size_t i = 0; i < gamma; ++i) {
        const auto rec = forward_decode(w, feed, draft.cache(), nullptr, {.attention = true});
        const std::size_t pos = p.first_position + i;
        HeadTable<std::vector<float>> rows(w.config.layers, w.config.heads);
        for (std::size_t h = 0; h < rows.size(); ++h) {
            const HeadId id = rows.id_of(h);
            const auto r = rec.attention->at(id).row(0).first(pos + 1);
            rows.at(id).assign(r.begin(), r.end());
        }
        p.attention_rows.push_back(std::move(rows));
        feed = argmax_token(rec.logits.row(0));
        p.tokens.push_back(feed);
    }
    return p;
}

struct RoundOutcome {
    std::vector<TokenId> proposed;
    std::size_t accepted_len = 0;
    TokenId correction_token = 0;  // target greedy token at the first mismatch, or the bonus token
    std::size_t masks_used = 0;    // mask sets consumed by this verification (0 when dense)
};

// One multi-row target pass over [pending, proposed...]. `masks`, when given,
// must start at the pending token's position and cover gamma + 1 rows.
inline RoundOutcome verify(ModelSession& target, std::span<const TokenId> proposed, const PrefillMaskSet* masks) {
    STS_EXPECTS(!proposed.empty(), "verify: empty proposal");
    target.sync();
    const std::size_t start = target.cache().length();
    std::vector<TokenId> block;
    block.reserve(proposed.size() + 1);
    block.push_back(target.committed().back());
    block.insert(block.end(), proposed.begin(), proposed.end());
    if (masks)
        for (const auto& rows : masks->heads)
            STS_EXPECTS(rows.size() == block.size(), "verify: masks cover " + std::to_string(rows.size()) +
                                                         " rows, verification block has " +
                                                         std::to_string(block.size()));

    const auto rec = forward_block(target.model(), block, target.cache(), masks);

    RoundOutcome out;
    out.proposed.assign(proposed.begin(), proposed.end());
    out.masks_used = masks ? 1 : 0;
    while (out.accepted_len < proposed.size() &&
           argmax_token(rec.logits.row(out.accepted_len)) == proposed[out.accepted_len])
        ++out.accepted_len;
    out.correction_token = argmax_token(rec.logits.row(out.accepted_len));

    // keep K/V of the pending token and the accepted proposals only
    target.cache().truncate(start + 1 + out.accepted_len);
    return out;
}

// Verification masks: row i < gamma uses the draft attention at proposal step i;
// the bonus row reuses the last step's mask. Every row also sees its own position.
inline PrefillMaskSet verification_masks(const Proposal& p, const SparsityConfig& cfg, const HeadMapping& mapping) {
    const std::size_t rows = p.tokens.size() + 1;
    PrefillMaskSet out{p.first_position, HeadTable<std::vector<IndexSet>>(mapping.entries.layers(), mapping.entries.heads())};
    for (auto& r : out.heads) r.reserve(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t step = std::min(i, p.tokens.size() - 1);
        const DecodeMaskSet target = remap_masks(draft_masks_decode(p.attention_rows[step], cfg), mapping);
        const IndexSet self{p.first_position + i};
        for (std::size_t h = 0; h < target.size(); ++h) {
            const HeadId id = target.id_of(h);
            out.heads.at(id).push_back(target.at(id).unite(self));
        }
    }
    return out;
}

struct SpecConfig {
    std::size_t gamma = 4;
    std::optional<SparsityConfig> sparsity;  // nullopt: dense verification
    const HeadMapping* mapping = nullptr;    // required when sparsity is set
    // Optional per-round mask dump (head -> indices of the first verification row).
    std::function<void(const nlohmann::json&)> mask_dump;
};

struct GenerateStats {
    std::size_t rounds = 0;
    std::size_t proposed = 0;
    std::size_t accepted = 0;
    std::size_t masks_generated = 0;
    std::size_t masks_consumed = 0;
    std::size_t masks_discarded = 0;  // rounds where part of the proposal was rejected
    std::size_t masks_retained = 0;   // rounds accepted in full
    std::size_t prefill_masks = 0;    // STS-PD prompt masks (not per-round)

    double acceptance_rate() const {
        return proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
    }
};

struct RoundEvent {
    std::size_t round = 0;
    std::size_t position = 0;  // position of the first verified row
    std::vector<TokenId> proposal;
    std::size_t accepted_len = 0;
    TokenId correction = 0;
    std::size_t mask_budget = 0;  // tokens per row before forced extras; context length when dense
    std::size_t page_size = 1;
    // pages_touched[layer] = sorted (head, page) pairs read by the verification pass
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> pages_touched;
};

inline nlohmann::json event_to_json(const RoundEvent& e) {
    nlohmann::json pages = nlohmann::json::array();
    for (const auto& layer : e.pages_touched) {
        nlohmann::json l = nlohmann::json::array();
        for (const auto& [h, p] : layer) l.push_back({h, p});
        pages.push_back(l);
    }
    return {{"round", e.round},         {"position", e.position},       {"proposal", e.proposal},
            {"accepted_len", e.accepted_len}, {"correction", e.correction}, {"mask_budget", e.mask_budget},
            {"page_size", e.page_size}, {"pages_touched", pages}};
}

inline RoundEvent round_event_from_json(const nlohmann::json& j) {
    RoundEvent e;
    e.round = j.at("round").get<std::size_t>();
    e.position = j.at("position").get<std::size_t>();
    e.proposal = j.at("proposal").get<std::vector<TokenId>>();
    e.accepted_len = j.at("accepted_len").get<std::size_t>();
    e.correction = j.at("correction").get<TokenId>();
    e.mask_budget = j.at("mask_budget").get<std::size_t>();
    e.page_size = j.value("page_size", std::size_t{1});
    for (const auto& layer : j.at("pages_touched")) {
        std::vector<std::pair<std::size_t, std::size_t>> l;
        for (const auto& hp : layer) l.emplace_back(hp.at(0).get<std::size_t>(), hp.at(1).get<std::size_t>());
        e.pages_touched.push_back(std::move(l));
    }
    return e;
}

struct GenerateResult {
    std::vector<TokenId> tokens;  // exactly max_new new tokens
    GenerateStats stats;
    std::vector<RoundEvent> events;
};

namespace detail {

inline std::vector<std::vector<std::pair<std::size_t, std::size_t>>> pages_of(const PrefillMaskSet& m,
                                                                              std::size_t page_size) {
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> out(m.heads.layers());
    for (std::size_t l = 0; l < m.heads.layers(); ++l) {
        std::set<std::pair<std::size_t, std::size_t>> touched;
        for (std::size_t h = 0; h < m.heads.heads(); ++h)
            for (const auto& row : m.heads.at(l, h))
                for (std::size_t i : row) touched.emplace(h, i / page_size);
        out[l].assign(touched.begin(), touched.end());
    }
    return out;
}

inline void check_mapping(const HeadMapping& m, const ModelConfig& draft, const ModelConfig& target) {
    if (m.entries.layers() != target.layers || m.entries.heads() != target.heads)
        throw InputError("head mapping covers " + std::to_string(m.entries.layers()) + "x" +
                         std::to_string(m.entries.heads()) + " target heads, model has " +
                         std::to_string(target.layers) + "x" + std::to_string(target.heads));
    for (const auto& e : m.entries)
        if (e.draft.layer >= draft.layers || e.draft.head >= draft.heads)
            throw InputError("head mapping references draft head " + e.draft.str() + " absent from the draft model");
}

}  // namespace detail

// propose -> mask -> verify until max_new tokens are committed. Exactly one mask
// set is built per round and dropped after its verification pass.
inline GenerateResult generate(const ModelWeights& draft_model, const ModelWeights& target_model,
                               std::span<const TokenId> prompt, std::size_t max_new, const SpecConfig& cfg) {
    if (cfg.gamma < 1) throw ConfigError("gamma must be >= 1");
    if (prompt.empty()) throw InputError("generate: empty prompt");
    if (draft_model.config.vocab != target_model.config.vocab)
        throw InputError("draft and target vocab sizes differ");
    if (cfg.sparsity) {
        cfg.sparsity->validate();
        if (!cfg.mapping) throw ConfigError("sparse generation requires a head mapping");
        detail::check_mapping(*cfg.mapping, draft_model.config, target_model.config);
    }
    const std::size_t need = prompt.size() + max_new + cfg.gamma;
    for (const ModelWeights* m : {&draft_model, &target_model})
        if (need > m->config.max_seq)
            throw CapacityError("prompt (" + std::to_string(prompt.size()) + ") + max_new (" + std::to_string(max_new) +
                                ") + gamma (" + std::to_string(cfg.gamma) + ") exceeds max_seq " +
                                std::to_string(m->config.max_seq));

    GenerateResult res;
    ModelSession draft(draft_model), target(target_model);
    draft.commit(prompt);
    target.commit(prompt);

    // prompt prefill (all but the pending last token)
    const std::size_t head_len = prompt.size() - 1;
    if (head_len > 0) {
        const auto head = prompt.first(head_len);
        auto d = forward_prefill(draft_model, head, nullptr, {.attention = true});
        draft.cache() = std::move(d.cache);
        if (cfg.sparsity && cfg.sparsity->scope == SparsityScope::PrefillDecode) {
            const auto masks =
                remap_prefill_masks(draft_masks_prefill(*d.record.attention, 0, *cfg.sparsity), 0, *cfg.mapping);
            target.cache() = forward_prefill(target_model, head, &masks).cache;
            ++res.stats.prefill_masks;
        } else {
            target.cache() = forward_prefill(target_model, head).cache;
        }
    }

    const std::size_t page_size = target_model.config.page_size;
    while (res.tokens.size() < max_new) {
        Proposal p = propose(draft, cfg.gamma);

        std::optional<PrefillMaskSet> masks;
        if (cfg.sparsity) {
            masks = verification_masks(p, *cfg.sparsity, *cfg.mapping);
            ++res.stats.masks_generated;
            if (cfg.mask_dump) {
                DecodeMaskSet first(masks->heads.layers(), masks->heads.heads());
                for (std::size_t i = 0; i < first.size(); ++i) first.at(first.id_of(i)) = masks->heads.at(first.id_of(i))[0];
                cfg.mask_dump(mask_dump_json(first, res.stats.rounds));
            }
        }

        RoundEvent ev;
        ev.round = res.stats.rounds;
        ev.position = p.first_position;
        ev.proposal = p.tokens;
        ev.page_size = page_size;
        const std::size_t context = p.first_position + 1;
        ev.mask_budget = cfg.sparsity ? cfg.sparsity->budget.resolve(context) : context;
        ev.pages_touched = masks ? detail::pages_of(*masks, page_size)
                                 : detail::pages_of(dense_prefill_masks(target_model.config.layers,
                                                                        target_model.config.heads, p.first_position,
                                                                        p.tokens.size() + 1),
                                                    page_size);

        const RoundOutcome out = verify(target, p.tokens, masks ? &*masks : nullptr);
        res.stats.masks_consumed += out.masks_used;
        if (masks) {
            if (out.accepted_len < cfg.gamma)
                ++res.stats.masks_discarded;
            else
                ++res.stats.masks_retained;
            masks.reset();
        }

        std::vector<TokenId> fresh(p.tokens.begin(), p.tokens.begin() + static_cast<std::ptrdiff_t>(out.accepted_len));
        fresh.push_back(out.correction_token);
        draft.commit(fresh);
        target.commit(fresh);
        for (TokenId t : fresh)
            if (res.tokens.size() < max_new) res.tokens.push_back(t);

        ++res.stats.rounds;
        res.stats.proposed += cfg.gamma;
        res.stats.accepted += out.accepted_len;
        ev.accepted_len = out.accepted_len;
        ev.correction = out.correction_token;
        res.events.push_back(std::move(ev));
    }
    return res;
}

}  // namespace sts
