// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "offload_oracle.hpp"
#include "sts/offloadsim.hpp"

namespace sts {
namespace {

// L=2, c=3, tau=2, two missing pages per layer, one step
std::pair<OffloadConfig, std::vector<StepTrace>> worked_example() {
    OffloadConfig cfg;
    cfg.layers = 2;
    cfg.per_layer_compute = 3;
    cfg.page_bytes = 2;
    cfg.link_bandwidth = 1;
    cfg.fast_tier_capacity = 8;
    StepTrace st;
    st.layers = {{{0, 0}, {0, 1}}, {{1, 0}, {1, 1}}};
    return {cfg, {st}};
}

TEST(Simulate, WorkedExample) {
    const auto [cfg, steps] = worked_example();
    EXPECT_EQ(simulate(Strategy::FullResident, steps, cfg).total.elapsed, 6u);
    EXPECT_EQ(simulate(Strategy::OnDemand, steps, cfg).total.elapsed, 14u);
    const auto pf = simulate(Strategy::Prefetch, steps, cfg);
    EXPECT_EQ(pf.total.elapsed, 11u);
    EXPECT_EQ(pf.total.stall, 5u);
    EXPECT_EQ(pf.total.transfer, 8u);
    EXPECT_DOUBLE_EQ(pf.steps[0].overlapped_fraction(), 3.0 / 8.0);
}

TEST(Simulate, FullResidentNeverStalls) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 30; ++i) {
        const auto rc = testing::random_offload_case(rng);
        const auto r = simulate(Strategy::FullResident, rc.steps, rc.cfg);
        EXPECT_EQ(r.total.stall, 0u);
        EXPECT_EQ(r.total.elapsed, rc.cfg.layers * rc.cfg.per_layer_compute * rc.steps.size());
    }
}

TEST(Simulate, MatchesEventQueueOracle) {
    std::mt19937_64 rng(2024);
    for (int i = 0; i < 200; ++i) {
        const auto rc = testing::random_offload_case(rng);
        for (auto s : {Strategy::FullResident, Strategy::OnDemand, Strategy::Prefetch}) {
            const auto got = simulate(s, rc.steps, rc.cfg);
            const auto want = testing::offload_oracle(s, rc.steps, rc.cfg);
            ASSERT_EQ(got.steps.size(), want.size());
            for (std::size_t k = 0; k < want.size(); ++k) {
                EXPECT_EQ(got.steps[k].elapsed, want[k].elapsed) << "case " << i << " " << to_string(s) << " step " << k;
                EXPECT_EQ(got.steps[k].stall, want[k].stall) << "case " << i;
                EXPECT_EQ(got.steps[k].transfer, want[k].transfer) << "case " << i;
                EXPECT_EQ(got.steps[k].elapsed, got.steps[k].compute + got.steps[k].stall);
            }
        }
    }
}

TEST(CompareStrategies, Dominance) {
    std::mt19937_64 rng(77);
    for (int i = 0; i < 200; ++i) {
        const auto rc = testing::random_offload_case(rng);
        const auto cmp = compare_strategies(rc.steps, rc.cfg);
        EXPECT_LE(cmp.full.total.elapsed, cmp.prefetch.total.elapsed);
        EXPECT_LE(cmp.prefetch.total.elapsed, cmp.on_demand.total.elapsed);
        for (const auto& st : cmp.prefetch.steps) {
            EXPECT_GE(st.overlapped_fraction(), 0.0);
            EXPECT_LE(st.overlapped_fraction(), 1.0);
        }
    }
}

TEST(CompareStrategies, ComputeBoundPrefetchPaysFirstLayerOnly) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
        OffloadConfig cfg;
        cfg.layers = 1 + rng() % 6;
        cfg.page_bytes = 1 + rng() % 4;
        cfg.link_bandwidth = 1;
        const std::size_t m = 1 + rng() % 4;
        cfg.per_layer_compute = m * cfg.page_bytes + rng() % 5;  // c >= m * tau
        StepTrace st;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            std::vector<PageRef> refs;
            for (std::size_t p = 0; p < m; ++p) refs.push_back({0, p});
            st.layers.push_back(refs);
        }
        cfg.fast_tier_capacity = m * cfg.layers;
        const auto cmp = compare_strategies({st}, cfg);
        EXPECT_EQ(cmp.prefetch.total.elapsed, cmp.full.total.elapsed + m * cfg.transfer_time());
        EXPECT_EQ(cmp.prefetch.total.elapsed, testing::offload_oracle(Strategy::Prefetch, {st}, cfg)[0].elapsed);
    }
}

TEST(Simulate, ResidencyCarriesAcrossSteps) {
    auto [cfg, steps] = worked_example();
    steps.push_back(steps[0]);
    const auto r = simulate(Strategy::OnDemand, steps, cfg);
    EXPECT_EQ(r.steps[1].transfer, 0u);
    EXPECT_EQ(r.steps[1].elapsed, 6u);
}

TEST(Simulate, LeastRecentlyUsedEviction) {
    OffloadConfig cfg;
    cfg.layers = 1;
    cfg.per_layer_compute = 1;
    cfg.page_bytes = 1;
    cfg.fast_tier_capacity = 2;
    auto step = [](std::vector<std::size_t> pages) {
        StepTrace st;
        st.layers.emplace_back();
        for (auto p : pages) st.layers[0].push_back({0, p});
        return st;
    };
    // {0,1} -> {2}: evicts 0 (older) -> {1}: hit -> {0}: miss
    const auto r = simulate(Strategy::OnDemand, {step({0, 1}), step({2}), step({1}), step({0})}, cfg);
    EXPECT_EQ(r.steps[0].transfer, 2u);
    EXPECT_EQ(r.steps[1].transfer, 1u);
    EXPECT_EQ(r.steps[2].transfer, 0u);
    EXPECT_EQ(r.steps[3].transfer, 1u);
}

TEST(Simulate, CapacityAndShapeErrors) {
    auto [cfg, steps] = worked_example();
    cfg.fast_tier_capacity = 3;
    EXPECT_THROW(simulate(Strategy::Prefetch, steps, cfg), ConfigError);
    cfg.fast_tier_capacity = 4;
    EXPECT_NO_THROW(simulate(Strategy::Prefetch, steps, cfg));
    cfg.layers = 3;
    EXPECT_THROW(simulate(Strategy::Prefetch, steps, cfg), InputError);
    cfg.layers = 2;
    cfg.link_bandwidth = 0;
    EXPECT_THROW(simulate(Strategy::Prefetch, steps, cfg), ConfigError);
}

TEST(Simulate, NoLookaheadPrefetchFallsBackToOnDemand) {
    auto [cfg, steps] = worked_example();
    cfg.lookahead = false;
    EXPECT_EQ(simulate(Strategy::Prefetch, steps, cfg).total.elapsed, 14u);
    EXPECT_EQ(testing::offload_oracle(Strategy::Prefetch, steps, cfg)[0].elapsed, 14u);
}

TEST(Simulate, TransferTimeRoundsUp) {
    OffloadConfig cfg;
    cfg.page_bytes = OffloadConfig::default_page_bytes(4, 8);
    EXPECT_EQ(cfg.page_bytes, 256u);
    cfg.link_bandwidth = 100;
    EXPECT_EQ(cfg.transfer_time(), 3u);
}

TEST(EventLog, RoundTripToTraces) {
    RoundEvent e;
    e.round = 3;
    e.position = 10;
    e.proposal = {1, 2};
    e.accepted_len = 1;
    e.correction = 7;
    e.mask_budget = 4;
    e.page_size = 2;
    e.pages_touched = {{{0, 1}, {1, 5}}, {{0, 0}}};
    std::stringstream log;
    log << event_to_json(e).dump() << "\n\n" << event_to_json(e).dump() << "\n";
    const auto events = parse_event_log(log);
    ASSERT_EQ(events.size(), 2u);
    const auto traces = traces_from_events(events);
    ASSERT_EQ(traces[0].layers.size(), 2u);
    EXPECT_EQ(traces[0].layers[0][1], (PageRef{1, 5}));

    std::stringstream bad("{\"round\": 1}\n");
    EXPECT_THROW(parse_event_log(bad), InputError);
}

TEST(LatencyCsv, HeaderAndRows) {
    const auto [cfg, steps] = worked_example();
    const auto csv = latency_csv(compare_strategies(steps, cfg));
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,strategy,compute,transfer,stall,elapsed");
    EXPECT_NE(csv.find("0,prefetch,6,8,5,11\n"), std::string::npos);
    EXPECT_NE(csv.find("total,ondemand,6,8,8,14\n"), std::string::npos);
    EXPECT_EQ(csv, latency_csv(compare_strategies(steps, cfg)));
}

}  // namespace
}  // namespace sts
