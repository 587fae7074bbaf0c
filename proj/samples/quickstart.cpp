// SPDX-License-Identifier: Apache-2.0

// Planted draft/target pair -> head mapping -> sparse speculative decoding.

#include <cstdio>

#include "sts/evalkit.hpp"

int main() {
    using namespace sts;

    PlantedPairConfig pc;
    pc.target.layers = 4;
    pc.target.heads = 4;
    pc.target.head_dim = 8;
    pc.target.vocab = 64;
    pc.target.max_seq = 128;
    pc.target.page_size = 4;
    pc.target.seed = 7;
    pc.draft_layers = 2;
    pc.residual_gain = 0.3;
    const PlantedPair pp = planted_pair(pc);

    CorpusSpec cs;
    cs.seed = 9;
    const Corpus corpus = synthetic_corpus(cs, pc.target.vocab);
    const HeadMapping map = find_head_mapping(collect_traces(pp.draft, pp.target, corpus), 8);

    SpecConfig sc;
    sc.gamma = 4;
    sc.sparsity = SparsityConfig{};
    sc.sparsity->budget = Budget::tokens(8);
    sc.sparsity->page_size = 4;
    sc.mapping = &map;

    const std::vector<TokenId> prompt(corpus[0].begin(), corpus[0].begin() + 32);
    const GenerateResult res = generate(pp.draft, pp.target, prompt, 32, sc);
    std::printf("rounds %zu, acceptance %.3f, masks generated %zu, discarded %zu\n", res.stats.rounds,
                res.stats.acceptance_rate(), res.stats.masks_generated, res.stats.masks_discarded);

    const RecallReport r = mask_recall(pp.draft, pp.target, map, corpus, {8, 1, 0});
    std::printf("mask recall %.3f (random %.3f)\n", r.recall, r.random_baseline);
    return 0;
}
