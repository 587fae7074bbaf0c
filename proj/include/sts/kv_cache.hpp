// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "sts/error.hpp"
#include "sts/head.hpp"

namespace sts {

// Residency tags only feed the offload cost model; attention math never reads them.
enum class Residency { FastTier, SlowTier };

struct KVPage {
    std::vector<float> keys;    // page_size x head_dim
    std::vector<float> values;  // page_size x head_dim
    std::size_t used = 0;
    Residency tier = Residency::FastTier;
};

// Key/value storage of one attention head, split into fixed-size pages.
class HeadCache {
public:
    HeadCache() = default;
    HeadCache(std::size_t page_size, std::size_t head_dim) : page_size_(page_size), head_dim_(head_dim) {
        STS_EXPECTS(page_size >= 1 && head_dim >= 1, "HeadCache: page_size and head_dim must be >= 1");
    }

    std::size_t length() const noexcept { return length_; }
    std::size_t page_size() const noexcept { return page_size_; }
    std::size_t head_dim() const noexcept { return head_dim_; }
    std::size_t page_count() const noexcept { return pages_.size(); }
    const std::vector<KVPage>& pages() const noexcept { return pages_; }

    void append(std::span<const float> key, std::span<const float> value) {
        STS_EXPECTS(key.size() == head_dim_ && value.size() == head_dim_, "HeadCache: key/value width mismatch");
        if (pages_.empty() || pages_.back().used == page_size_) {
            KVPage page;
            page.keys.assign(page_size_ * head_dim_, 0.0f);
            page.values.assign(page_size_ * head_dim_, 0.0f);
            pages_.push_back(std::move(page));
        }
        KVPage& page = pages_.back();
        std::copy(key.begin(), key.end(), page.keys.begin() + static_cast<std::ptrdiff_t>(page.used * head_dim_));
        std::copy(value.begin(), value.end(), page.values.begin() + static_cast<std::ptrdiff_t>(page.used * head_dim_));
        ++page.used;
        ++length_;
    }

    std::span<const float> key(std::size_t pos) const {
        STS_EXPECTS(pos < length_, "HeadCache: key position out of range");
        const KVPage& page = pages_[pos / page_size_];
        return {page.keys.data() + (pos % page_size_) * head_dim_, head_dim_};
    }

    std::span<const float> value(std::size_t pos) const {
        STS_EXPECTS(pos < length_, "HeadCache: value position out of range");
        const KVPage& page = pages_[pos / page_size_];
        return {page.values.data() + (pos % page_size_) * head_dim_, head_dim_};
    }

    // Drops every entry at or after `new_length`.
    void truncate(std::size_t new_length) {
        if (new_length >= length_) return;
        const std::size_t keep_pages = (new_length + page_size_ - 1) / page_size_;
        pages_.resize(keep_pages);
        if (!pages_.empty()) pages_.back().used = new_length - (keep_pages - 1) * page_size_;
        length_ = new_length;
    }

    void set_tier(std::size_t page, Residency tier) {
        STS_EXPECTS(page < pages_.size(), "HeadCache: page index out of range");
        pages_[page].tier = tier;
    }

private:
    std::size_t page_size_ = 1;
    std::size_t head_dim_ = 1;
    std::vector<KVPage> pages_;
    std::size_t length_ = 0;
};

class PagedKVCache {
public:
    PagedKVCache() = default;
    PagedKVCache(std::size_t layers, std::size_t heads, std::size_t head_dim, std::size_t page_size,
                 std::size_t capacity)
        : heads_(layers, heads, HeadCache(page_size, head_dim)), page_size_(page_size), capacity_(capacity) {}

    std::size_t layers() const noexcept { return heads_.layers(); }
    std::size_t heads() const noexcept { return heads_.heads(); }
    std::size_t page_size() const noexcept { return page_size_; }
    std::size_t capacity() const noexcept { return capacity_; }

    // Logical length N. Between forward passes every head holds exactly N entries.
    std::size_t length() const { return heads_.size() ? heads_.at(0, 0).length() : 0; }

    HeadCache& head(HeadId id) { return heads_.at(id); }
    const HeadCache& head(HeadId id) const { return heads_.at(id); }
    HeadCache& head(std::size_t layer, std::size_t h) { return heads_.at(layer, h); }
    const HeadCache& head(std::size_t layer, std::size_t h) const { return heads_.at(layer, h); }

    void truncate(std::size_t new_length) {
        for (auto& h : heads_) h.truncate(new_length);
    }

    void set_tier_all(Residency tier) {
        for (auto& h : heads_)
            for (std::size_t p = 0; p < h.page_count(); ++p) h.set_tier(p, tier);
    }

private:
    HeadTable<HeadCache> heads_;
    std::size_t page_size_ = 1;
    std::size_t capacity_ = 0;
};

}  // namespace sts
