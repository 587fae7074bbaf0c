// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sts/error.hpp"

namespace sts {

// Dense row-major matrix. Storage is float32; reductions accumulate in double.
class Tensor2D {
public:
    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        STS_EXPECTS(data_.size() == rows_ * cols_, "Tensor2D: data length does not match rows x cols");
    }
    Tensor2D(std::initializer_list<std::initializer_list<float>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            STS_EXPECTS(row.size() == cols_, "Tensor2D: ragged initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    bool operator==(const Tensor2D&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Strictly increasing list of token positions.
class IndexSet {
public:
    IndexSet() = default;
    IndexSet(std::initializer_list<std::size_t> init) : IndexSet(std::vector<std::size_t>(init)) {}

    // Sorts and deduplicates.
    explicit IndexSet(std::vector<std::size_t> indices) : idx_(std::move(indices)) {
        std::sort(idx_.begin(), idx_.end());
        idx_.erase(std::unique(idx_.begin(), idx_.end()), idx_.end());
    }

    static IndexSet range(std::size_t first, std::size_t last) {
        IndexSet s;
        s.idx_.resize(last > first ? last - first : 0);
        std::iota(s.idx_.begin(), s.idx_.end(), first);
        return s;
    }

    std::size_t size() const noexcept { return idx_.size(); }
    bool empty() const noexcept { return idx_.empty(); }
    auto begin() const noexcept { return idx_.begin(); }
    auto end() const noexcept { return idx_.end(); }
    std::size_t operator[](std::size_t i) const { return idx_[i]; }
    std::size_t back() const { return idx_.back(); }
    std::span<const std::size_t> indices() const noexcept { return idx_; }

    bool contains(std::size_t i) const { return std::binary_search(idx_.begin(), idx_.end(), i); }

    // True when every index is below `bound`.
    bool bounded_by(std::size_t bound) const { return idx_.empty() || idx_.back() < bound; }

    IndexSet unite(const IndexSet& other) const {
        IndexSet out;
        out.idx_.reserve(idx_.size() + other.idx_.size());
        std::set_union(idx_.begin(), idx_.end(), other.idx_.begin(), other.idx_.end(),
                       std::back_inserter(out.idx_));
        return out;
    }

    std::size_t intersection_size(const IndexSet& other) const {
        std::size_t n = 0;
        auto a = idx_.begin();
        auto b = other.idx_.begin();
        while (a != idx_.end() && b != other.idx_.end()) {
            if (*a < *b) {
                ++a;
            } else if (*b < *a) {
                ++b;
            } else {
                ++n;
                ++a;
                ++b;
            }
        }
        return n;
    }

    bool is_subset_of(const IndexSet& other) const {
        return std::includes(other.idx_.begin(), other.idx_.end(), idx_.begin(), idx_.end());
    }

    bool operator==(const IndexSet&) const = default;

private:
    std::vector<std::size_t> idx_;
};

inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
    STS_EXPECTS(a.cols() == b.rows(), "matmul: dimension mismatch (" + std::to_string(a.rows()) + "x" +
                                          std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                                          "x" + std::to_string(b.cols()) + ")");
    Tensor2D out(a.rows(), b.cols());
    std::vector<double> acc(b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const double lhs = a(i, p);
            if (lhs == 0.0) continue;
            const auto brow = b.row(p);
            for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += lhs * brow[j];
        }
        auto orow = out.row(i);
        for (std::size_t j = 0; j < b.cols(); ++j) orow[j] = static_cast<float>(acc[j]);
    }
    return out;
}

// Softmax over the first `active` entries of `logits`, written into `out`;
// entries past the active prefix are set to exactly zero.
inline void softmax_prefix(std::span<const float> logits, std::size_t active, std::span<float> out) {
    STS_EXPECTS(active >= 1, "softmax: empty active prefix");
    STS_EXPECTS(active <= logits.size() && out.size() == logits.size(), "softmax: cutoff exceeds row length");
    double mx = -INFINITY;
    for (std::size_t j = 0; j < active; ++j) {
        STS_EXPECTS(std::isfinite(logits[j]), "softmax: non-finite input");
        mx = std::max(mx, static_cast<double>(logits[j]));
    }
    double sum = 0.0;
    std::vector<double> e(active);
    for (std::size_t j = 0; j < active; ++j) {
        e[j] = std::exp(static_cast<double>(logits[j]) - mx);
        sum += e[j];
    }
    for (std::size_t j = 0; j < active; ++j) out[j] = static_cast<float>(e[j] / sum);
    for (std::size_t j = active; j < out.size(); ++j) out[j] = 0.0f;
}

// Row-wise softmax. With `causal_upto`, row r is normalized over columns [0, causal_upto[r]).
inline Tensor2D row_softmax(const Tensor2D& m, const std::optional<std::vector<std::size_t>>& causal_upto = {}) {
    if (causal_upto) STS_EXPECTS(causal_upto->size() == m.rows(), "row_softmax: one cutoff per row required");
    Tensor2D out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const std::size_t active = causal_upto ? (*causal_upto)[r] : m.cols();
        softmax_prefix(m.row(r), active, out.row(r));
    }
    return out;
}

// Indices of the min(k, n) largest scores, ties to the lowest index, returned ascending.
template <typename T>
IndexSet topk_indices(std::span<const T> scores, std::size_t k) {
    STS_EXPECTS(k >= 1, "topk_indices: k must be >= 1");
    STS_EXPECTS(!scores.empty(), "topk_indices: empty score list");
    for (const T& v : scores) STS_EXPECTS(std::isfinite(static_cast<double>(v)), "topk_indices: non-finite score");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t take = std::min(k, scores.size());
    if (take < scores.size()) {
        auto better = [&](std::size_t a, std::size_t b) {
            if (scores[a] != scores[b]) return scores[a] > scores[b];
            return a < b;
        };
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), better);
        order.resize(take);
    }
    return IndexSet(std::move(order));
}

template <typename T>
IndexSet topk_indices(const std::vector<T>& scores, std::size_t k) {
    return topk_indices(std::span<const T>(scores), k);
}

// Standard-normal stream: mt19937_64 uniforms -> Box-Muller (both outputs used).
class NormalStream {
public:
    explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

    double next() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1], u2 in [0, 1)
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    std::uint64_t bits() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline NormalStream prng_stream(std::uint64_t seed) { return NormalStream(seed); }

}  // namespace sts
