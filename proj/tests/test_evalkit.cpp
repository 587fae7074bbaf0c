// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <limits>
#include <random>

#include "sts/evalkit.hpp"
#include "test_support.hpp"

namespace sts {
namespace {

PlantedPairConfig small_pair(std::uint64_t seed) {
    PlantedPairConfig pc;
    pc.target.layers = 4;
    pc.target.heads = 4;
    pc.target.head_dim = 8;
    pc.target.vocab = 64;
    pc.target.max_seq = 64;
    pc.target.seed = seed;
    pc.draft_layers = 2;
    pc.residual_gain = 0.3;
    return pc;
}

Corpus corpus(std::uint64_t seed, std::size_t samples, std::size_t length = 64) {
    CorpusSpec cs;
    cs.seed = seed;
    cs.samples = samples;
    cs.length = length;
    return synthetic_corpus(cs, 64);
}

HeadMapping identity_mapping(const ModelConfig& c) {
    HeadMapping m;
    m.k = 1;
    m.draft_config = c;
    m.target_config = c;
    m.entries = HeadTable<MappingEntry>(c.layers, c.heads);
    for (std::size_t i = 0; i < m.entries.size(); ++i) m.entries.at(m.entries.id_of(i)).draft = m.entries.id_of(i);
    return m;
}

TEST(SyntheticCorpus, ShapeDeterminismAndBigramStructure) {
    CorpusSpec cs;
    cs.seed = 5;
    cs.samples = 20;
    cs.length = 200;
    cs.repeat_prob = 0.8;
    const auto a = synthetic_corpus(cs, 32);
    EXPECT_EQ(a, synthetic_corpus(cs, 32));
    ASSERT_EQ(a.size(), 20u);
    // the most frequent successor of each token should cover ~80% of transitions
    std::map<std::pair<TokenId, TokenId>, std::size_t> pairs;
    std::map<TokenId, std::size_t> from;
    for (const auto& s : a) {
        ASSERT_EQ(s.size(), 200u);
        for (std::size_t t = 0; t + 1 < s.size(); ++t) {
            ASSERT_LT(s[t], 32u);
            ++pairs[{s[t], s[t + 1]}];
            ++from[s[t]];
        }
    }
    std::map<TokenId, std::size_t> best;
    for (const auto& [p, c] : pairs) best[p.first] = std::max(best[p.first], c);
    std::size_t top = 0, all = 0;
    for (const auto& [t, c] : from) {
        top += best[t];
        all += c;
    }
    EXPECT_NEAR(static_cast<double>(top) / static_cast<double>(all), 0.8 + 0.2 / 32, 0.03);
    cs.repeat_prob = 1.5;
    EXPECT_THROW(synthetic_corpus(cs, 32), ConfigError);
}

TEST(TokenFile, LoadsAndValidates) {
    const auto path = std::filesystem::temp_directory_path() / "sts_tokens.json";
    io::write_text(path, "[[1,2,3],[4,5]]");
    EXPECT_EQ(load_token_file(path, 8), (Corpus{{1, 2, 3}, {4, 5}}));
    EXPECT_THROW(load_token_file(path, 5), InputError);
    io::write_text(path, "{\"a\": 1}");
    EXPECT_THROW(load_token_file(path, 8), InputError);
    std::filesystem::remove(path);
}

TEST(PlantedPair, SharesEmbeddingsAndCopiesQueryKey) {
    const auto pc = small_pair(3);
    const auto pp = planted_pair(pc);
    EXPECT_EQ(pp.draft.config.layers, 2u);
    EXPECT_EQ(pp.draft.config.hidden(), pp.target.config.hidden());
    EXPECT_EQ(pp.draft.token_embedding, pp.target.token_embedding);
    std::set<HeadId> used;
    for (std::size_t i = 0; i < pp.source.size(); ++i) {
        const HeadId dh = pp.source.id_of(i), th = pp.source.at(dh);
        used.insert(th);
        double err = 0.0;
        for (std::size_t r = 0; r < 32; ++r)
            for (std::size_t c = 0; c < 8; ++c)
                err = std::max(err, std::fabs(double(pp.draft.layers[dh.layer].wq(r, dh.head * 8 + c)) -
                                              pp.target.layers[th.layer].wq(r, th.head * 8 + c)));
        EXPECT_LT(err, 0.05);  // perturbation std ~ 0.05 / sqrt(32)
    }
    EXPECT_EQ(used.size(), 8u);
    auto bad = pc;
    bad.draft_layers = 5;
    EXPECT_THROW(planted_pair(bad), ConfigError);
}

TEST(MaskRecall, FullBudgetIsExactlyOne) {
    const auto pp = planted_pair(small_pair(1));
    const auto map = find_head_mapping(collect_traces(pp.draft, pp.target, corpus(10, 2)), 8);
    const auto r = mask_recall(pp.draft, pp.target, map, corpus(11, 2), {64, 1, 0});
    EXPECT_EQ(r.recall, 1.0);
    EXPECT_EQ(r.random_baseline, 1.0);
}

TEST(MaskRecall, SelfMappedModelIsPerfect) {
    const auto pp = planted_pair(small_pair(2));
    const auto r = mask_recall(pp.target, pp.target, identity_mapping(pp.target.config), corpus(3, 2), {8, 1, 0});
    EXPECT_EQ(r.recall, 1.0);
}

TEST(MaskRecall, RandomBaselineMatchesSampledMasks) {
    const auto pp = planted_pair(small_pair(4));
    const Corpus eval = corpus(21, 1);
    const std::size_t k = 8;
    const auto map = find_head_mapping(collect_traces(pp.draft, pp.target, corpus(20, 2)), k);
    const auto r = mask_recall(pp.draft, pp.target, map, eval, {k, 1, 0});

    std::mt19937_64 rng(9);
    const auto ta = *forward_prefill(pp.target, eval[0], nullptr, {.attention = true}).record.attention;
    double sum = 0.0;
    std::size_t rows = 0;
    for (std::size_t t = 32; t < 64; ++t)
        for (const auto& a : ta) {
            std::vector<double> row(a.row(t).begin(), a.row(t).begin() + static_cast<std::ptrdiff_t>(t + 1));
            const auto oracle = testing::brute_topk(row, k);
            std::vector<std::size_t> idx(t + 1);
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            double acc = 0.0;
            for (int trial = 0; trial < 1000; ++trial) {
                std::shuffle(idx.begin(), idx.end(), rng);
                std::size_t hit = 0;
                for (std::size_t i = 0; i < std::min(k, t + 1); ++i) hit += oracle.count(idx[i]);
                acc += static_cast<double>(hit) / static_cast<double>(std::min(k, t + 1));
            }
            sum += acc / 1000.0;
            ++rows;
        }
    EXPECT_EQ(rows, r.rows);
    EXPECT_NEAR(r.random_baseline, sum / static_cast<double>(rows), 0.005);
}

TEST(MaskRecall, PlantedPairBeatsRandomTwofold) {
    const auto pp = planted_pair(small_pair(5));
    const auto map = find_head_mapping(collect_traces(pp.draft, pp.target, corpus(30, 10)), 8);
    std::size_t recovered = 0;
    for (std::size_t i = 0; i < pp.source.size(); ++i)
        recovered += map.at(pp.source.at(pp.source.id_of(i))).draft == pp.source.id_of(i);
    EXPECT_EQ(recovered, pp.source.size());
    const auto r = mask_recall(pp.draft, pp.target, map, corpus(31, 6), {8, 1, 0});
    EXPECT_GE(r.recall, 2.0 * r.random_baseline);
}

TEST(MaskRecall, MappingShapeMismatchIsInputError) {
    const auto pp = planted_pair(small_pair(6));
    auto c = pp.target.config;
    c.layers = 3;
    EXPECT_THROW(mask_recall(pp.draft, pp.target, identity_mapping(c), corpus(1, 1), {8, 1, 0}), InputError);
}

TEST(OraclePrunable, InfiniteThresholdHitsBound) {
    const auto pp = planted_pair(small_pair(7));
    const auto eval = corpus(40, 2, 32);
    const auto r = oracle_prunable_ratio(pp.target, eval, std::numeric_limits<double>::infinity());
    ASSERT_EQ(r.layers.size(), 4u);
    for (const auto& l : r.layers) {
        EXPECT_EQ(l.budget, 1u);
        EXPECT_DOUBLE_EQ(l.ratio, 1.0 - 1.0 / 32.0);
    }
}

TEST(OraclePrunable, NonDecreasingInThreshold) {
    const auto pp = planted_pair(small_pair(8));
    const auto eval = corpus(41, 2, 32);
    std::vector<double> prev(4, -1.0);
    for (double t : {0.0, 0.001, 0.01, 0.1, 1.0, 10.0}) {
        const auto r = oracle_prunable_ratio(pp.target, eval, t);
        for (std::size_t l = 0; l < 4; ++l) {
            EXPECT_GE(r.layers[l].ratio, prev[l]) << "layer " << l << " threshold " << t;
            EXPECT_LE(r.layers[l].delta_ppl, t);
            prev[l] = r.layers[l].ratio;
        }
    }
    EXPECT_THROW(oracle_prunable_ratio(pp.target, eval, -1.0), ConfigError);
}

TEST(PplVsBudget, DenseEndpointAndRowCount) {
    const auto pp = planted_pair(small_pair(9));
    const auto eval = corpus(50, 2, 48);
    const auto map = find_head_mapping(collect_traces(pp.draft, pp.target, eval), 4);
    const std::vector<std::size_t> sweep{2, 6, 48};
    const auto curve = ppl_vs_budget(pp.draft, pp.target, map, eval, sweep,
                                     {SparsityScope::DecodeOnly, SparsityScope::PrefillDecode});
    ASSERT_EQ(curve.rows.size(), 6u);
    EXPECT_NEAR(curve.dense_ppl, std::exp(std::log(perplexity(pp.target, eval[0])) * 0.5 +
                                          std::log(perplexity(pp.target, eval[1])) * 0.5),
                1e-9 * curve.dense_ppl);
    for (const auto& row : curve.rows) {
        EXPECT_TRUE(std::isfinite(row.ppl));
        if (row.budget == 48) {
            EXPECT_NEAR(row.delta_ppl, 0.0, 1e-6);
        }
    }
    EXPECT_EQ(curve.rows[0].scope, SparsityScope::DecodeOnly);
    EXPECT_EQ(curve.rows[1].scope, SparsityScope::PrefillDecode);
    EXPECT_THROW(ppl_vs_budget(pp.draft, pp.target, map, eval, {8, 4}, {SparsityScope::DecodeOnly}), ConfigError);
    EXPECT_THROW(ppl_vs_budget(pp.draft, pp.target, map, eval, {}, {SparsityScope::DecodeOnly}), ConfigError);
}

// STS-D leaves the first half dense, so its first-half NLL equals the dense model's.
TEST(PplVsBudget, DecodeScopeKeepsPromptRowsDense) {
    const auto pp = planted_pair(small_pair(10));
    const auto eval = corpus(60, 1, 32);
    const auto map = find_head_mapping(collect_traces(pp.draft, pp.target, eval), 4);
    SparsityConfig sc;
    sc.budget = Budget::tokens(2);
    const auto da = *forward_prefill(pp.draft, eval[0], nullptr, {.attention = true}).record.attention;
    PrefillMaskSet m = remap_prefill_masks(draft_masks_prefill(da, 0, sc), 0, map);
    for (auto& rows : m.heads)
        for (std::size_t r = 0; r < 16; ++r) rows[r] = IndexSet::range(0, r + 1);
    const auto sparse = forward_prefill(pp.target, eval[0], &m).record.logits;
    const auto dense = forward_prefill(pp.target, eval[0]).record.logits;
    for (std::size_t r = 0; r < 16; ++r) EXPECT_EQ(testing::max_rel_err(sparse.row(r), dense.row(r)), 0.0);
}

}  // namespace
}  // namespace sts
