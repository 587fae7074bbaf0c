// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "sts/tracestore.hpp"
#include "test_support.hpp"

namespace sts {
namespace {

namespace fs = std::filesystem;

ModelConfig cfg(std::size_t layers, std::size_t heads, std::uint64_t seed) {
    ModelConfig c;
    c.layers = layers;
    c.heads = heads;
    c.head_dim = 4;
    c.vocab = 32;
    c.max_seq = 16;
    c.seed = seed;
    return c;
}

class TraceDir : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("sts_traces_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path dir_;
};

TraceSet small_set() {
    const auto draft = init_model(cfg(2, 2, 1));
    const auto target = init_model(cfg(3, 2, 2));
    return collect_traces(draft, target, {{1, 2, 3, 4, 5, 6, 7, 8}, {9, 9, 1}});
}

TEST(CollectTraces, ShapesAndInvariants) {
    const auto ts = small_set();
    ASSERT_EQ(ts.samples.size(), 2u);
    EXPECT_EQ(ts.samples[0].draft.size(), 4u);
    EXPECT_EQ(ts.samples[0].target.size(), 6u);
    for (const auto& s : ts.samples) {
        for (const auto& m : s.draft) EXPECT_TRUE(is_causal_attention(m, s.length(), 1e-6));
        for (const auto& m : s.target) EXPECT_TRUE(is_causal_attention(m, s.length(), 1e-6));
    }
    EXPECT_EQ(ts.samples[0].draft.at(1, 1).rows(), 8u);
}

TEST(CollectTraces, SameModelTwiceGivesIdenticalTraces) {
    const auto m = init_model(cfg(2, 2, 5));
    const auto ts = collect_traces(m, m, {{3, 1, 4, 1, 5, 9}});
    EXPECT_EQ(ts.samples[0].draft, ts.samples[0].target);
}

TEST(CollectTraces, OversizedSampleNamesIndex) {
    const auto m = init_model(cfg(1, 1, 5));
    try {
        collect_traces(m, m, {{1, 2}, std::vector<TokenId>(17, 1)});
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos);
    }
    EXPECT_THROW(collect_traces(m, m, {}), InputError);
}

TEST_F(TraceDir, RoundTripIsExact) {
    const auto ts = small_set();
    const auto manifest = save_traces(ts, dir_);
    EXPECT_EQ(load_traces(dir_), ts);
    // only the lower triangle is stored
    EXPECT_EQ(manifest["samples"][0]["blobs"][0]["bytes"].get<std::size_t>(), 2u * 36u * 4u);
    EXPECT_EQ(trace_set_id(io::read_json(dir_ / "manifest.json")), manifest["trace_set_id"].get<std::string>());
}

TEST_F(TraceDir, RoundTripPropertyOnSyntheticSets) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        TraceSet ts{cfg(1 + trial % 2, 2, 1), cfg(2, 1 + trial % 3, 2), {}};
        for (int s = 0; s < 3; ++s) {
            const std::size_t n = 1 + rng() % 12;
            TraceSample sample;
            sample.tokens.assign(n, static_cast<TokenId>(s));
            sample.draft = HeadTable<Tensor2D>(ts.draft_config.layers, ts.draft_config.heads);
            sample.target = HeadTable<Tensor2D>(ts.target_config.layers, ts.target_config.heads);
            for (auto& m : sample.draft) m = testing::random_causal_attention(rng, n, 2.0);
            for (auto& m : sample.target) m = testing::random_causal_attention(rng, n, 2.0);
            ts.samples.push_back(sample);
        }
        fs::remove_all(dir_);
        save_traces(ts, dir_);
        EXPECT_EQ(load_traces(dir_), ts) << "trial " << trial;
    }
}

TEST_F(TraceDir, WrongDeclaredLengthNamesFile) {
    save_traces(small_set(), dir_);
    auto manifest = io::read_json(dir_ / "manifest.json");
    manifest["samples"][0]["blobs"][1]["bytes"] = 12;
    io::write_text(dir_ / "manifest.json", manifest.dump());
    try {
        load_traces(dir_);
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.kind(), LoadErrorKind::TruncatedBlob);
        EXPECT_NE(std::string(e.what()).find("draft_s00000_l001.bin"), std::string::npos);
    }
}

TEST_F(TraceDir, TruncatedBlob) {
    save_traces(small_set(), dir_);
    auto bytes = io::read_bytes(dir_ / "target_s00001_l002.bin");
    bytes.resize(bytes.size() - 4);
    io::write_bytes(dir_ / "target_s00001_l002.bin", bytes);
    try {
        load_traces(dir_);
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.kind(), LoadErrorKind::TruncatedBlob);
    }
}

TEST_F(TraceDir, ChecksumFailure) {
    save_traces(small_set(), dir_);
    auto bytes = io::read_bytes(dir_ / "draft_s00000_l000.bin");
    bytes[5] ^= 0x01;
    io::write_bytes(dir_ / "draft_s00000_l000.bin", bytes);
    try {
        load_traces(dir_);
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.kind(), LoadErrorKind::ChecksumMismatch);
    }
}

TEST_F(TraceDir, VersionBumpIsUnsupported) {
    save_traces(small_set(), dir_);
    auto manifest = io::read_json(dir_ / "manifest.json");
    manifest["format_version"] = kTraceFormatVersion + 1;
    io::write_text(dir_ / "manifest.json", manifest.dump());
    try {
        load_traces(dir_);
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.kind(), LoadErrorKind::UnsupportedVersion);
        EXPECT_NE(std::string(e.what()).find("unsupported version"), std::string::npos);
    }
}

TEST_F(TraceDir, NonCausalContentRejected) {
    TraceSet ts = small_set();
    ts.samples[1].target.at(0, 0)(2, 0) = 0.9f;  // row sum no longer 1
    save_traces(ts, dir_);
    try {
        load_traces(dir_);
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.kind(), LoadErrorKind::InvalidContent);
    }
}

}  // namespace
}  // namespace sts
