// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <vector>

#include "sts/error.hpp"

namespace sts {

struct HeadId {
    std::size_t layer = 0;
    std::size_t head = 0;

    auto operator<=>(const HeadId&) const = default;

    std::string str() const { return "(" + std::to_string(layer) + "," + std::to_string(head) + ")"; }
};

// Dense layers x heads grid, iterated in (layer, head) lexicographic order.
template <typename T>
class HeadTable {
public:
    HeadTable() = default;
    HeadTable(std::size_t layers, std::size_t heads, const T& fill = T{})
        : layers_(layers), heads_(heads), cells_(layers * heads, fill) {}

    std::size_t layers() const noexcept { return layers_; }
    std::size_t heads() const noexcept { return heads_; }
    std::size_t size() const noexcept { return cells_.size(); }

    bool contains(HeadId id) const noexcept { return id.layer < layers_ && id.head < heads_; }

    T& at(HeadId id) {
        check(id);
        return cells_[id.layer * heads_ + id.head];
    }
    const T& at(HeadId id) const {
        check(id);
        return cells_[id.layer * heads_ + id.head];
    }
    T& at(std::size_t layer, std::size_t head) { return at(HeadId{layer, head}); }
    const T& at(std::size_t layer, std::size_t head) const { return at(HeadId{layer, head}); }

    HeadId id_of(std::size_t flat) const { return {flat / heads_, flat % heads_}; }

    auto begin() noexcept { return cells_.begin(); }
    auto end() noexcept { return cells_.end(); }
    auto begin() const noexcept { return cells_.begin(); }
    auto end() const noexcept { return cells_.end(); }

    // All head ids in iteration order.
    std::vector<HeadId> ids() const {
        std::vector<HeadId> out;
        out.reserve(cells_.size());
        for (std::size_t i = 0; i < cells_.size(); ++i) out.push_back(id_of(i));
        return out;
    }

    bool operator==(const HeadTable&) const = default;

private:
    void check(HeadId id) const {
        STS_EXPECTS(contains(id), "head " + id.str() + " out of range for " + std::to_string(layers_) + "x" +
                                      std::to_string(heads_) + " table");
    }

    std::size_t layers_ = 0;
    std::size_t heads_ = 0;
    std::vector<T> cells_;
};

}  // namespace sts
