// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "sts/error.hpp"
#include "sts/head.hpp"
#include "sts/kv_cache.hpp"
#include "sts/numkit.hpp"

namespace sts {

// Per target head, the context positions a single decode query may attend to.
using DecodeMaskSet = HeadTable<IndexSet>;

// Per target head, one IndexSet per query row. Row r of the table is the query at
// absolute position first_row + r, and its set must lie within {0..first_row + r}.
struct PrefillMaskSet {
    std::size_t first_row = 0;
    HeadTable<std::vector<IndexSet>> heads;
};

// Attention of one query over the cached keys selected by `mask`: softmax of
// q.k_i / sqrt(d) renormalized over the mask only, then sum of weights * v_i.
// When `weights_out` is non-empty it receives the weight of every cache position
// (zero outside the mask).
inline std::vector<float> sparse_attention(std::span<const float> q, const HeadCache& kv, const IndexSet& mask,
                                           std::span<float> weights_out = {}) {
    STS_EXPECTS(!mask.empty(), "sparse_attention: empty mask");
    STS_EXPECTS(mask.bounded_by(kv.length()), "sparse_attention: mask index beyond cache length");
    STS_EXPECTS(q.size() == kv.head_dim(), "sparse_attention: query width mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(kv.head_dim()));

    std::vector<double> logits(mask.size());
    double mx = -INFINITY;
    for (std::size_t j = 0; j < mask.size(); ++j) {
        const auto k = kv.key(mask[j]);
        double dot = 0.0;
        for (std::size_t c = 0; c < q.size(); ++c) dot += static_cast<double>(q[c]) * k[c];
        logits[j] = dot * scale;
        mx = std::max(mx, logits[j]);
    }
    double sum = 0.0;
    for (double& l : logits) {
        l = std::exp(l - mx);
        sum += l;
    }

    std::vector<double> acc(q.size(), 0.0);
    for (std::size_t j = 0; j < mask.size(); ++j) {
        const double w = logits[j] / sum;
        logits[j] = w;
        const auto v = kv.value(mask[j]);
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += w * v[c];
    }

    if (!weights_out.empty()) {
        STS_EXPECTS(mask.bounded_by(weights_out.size()), "sparse_attention: weight buffer too small");
        std::fill(weights_out.begin(), weights_out.end(), 0.0f);
        for (std::size_t j = 0; j < mask.size(); ++j) weights_out[mask[j]] = static_cast<float>(logits[j]);
    }
    return {acc.begin(), acc.end()};
}

// Dense scaled scores q.k_i / sqrt(d) for positions [0, upto).
inline void attention_scores(std::span<const float> q, const HeadCache& kv, std::size_t upto, std::span<float> out) {
    STS_EXPECTS(upto <= kv.length() && out.size() >= upto, "attention_scores: range out of bounds");
    const double scale = 1.0 / std::sqrt(static_cast<double>(kv.head_dim()));
    for (std::size_t i = 0; i < upto; ++i) {
        const auto k = kv.key(i);
        double dot = 0.0;
        for (std::size_t c = 0; c < q.size(); ++c) dot += static_cast<double>(q[c]) * k[c];
        out[i] = static_cast<float>(dot * scale);
    }
}

}  // namespace sts
