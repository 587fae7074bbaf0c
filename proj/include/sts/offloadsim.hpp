// SPDX-License-Identifier: Apache-2.0

#pragma once

// Logical-time KV offload simulator. Two serial resources per step: the compute
// engine (one layer at a time) and the transfer link (one page at a time).

#include <algorithm>
#include <cstdint>
#include <istream>
#include <list>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "sts/error.hpp"
#include "sts/specdec.hpp"

namespace sts {

using SimTime = std::uint64_t;

enum class Strategy { FullResident, OnDemand, Prefetch };

inline std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::FullResident: return "full";
        case Strategy::OnDemand: return "ondemand";
        case Strategy::Prefetch: return "prefetch";
    }
    return "?";
}

struct PageRef {
    std::size_t head = 0;
    std::size_t page = 0;
    auto operator<=>(const PageRef&) const = default;
};

// step.layers[i] = pages layer i reads during that step
struct StepTrace {
    std::vector<std::vector<PageRef>> layers;
};

struct OffloadConfig {
    std::size_t layers = 2;
    SimTime per_layer_compute = 1;
    std::uint64_t page_bytes = 0;   // 0: derive from the model page geometry
    std::uint64_t link_bandwidth = 1;  // bytes per time unit
    std::size_t fast_tier_capacity = 64;  // pages
    bool lookahead = true;  // masks known before layer 0 runs

    static std::uint64_t default_page_bytes(std::size_t page_size, std::size_t head_dim) {
        return 2ull * page_size * head_dim * 4ull;  // K and V, float32
    }

    SimTime transfer_time() const { return (page_bytes + link_bandwidth - 1) / link_bandwidth; }

    void validate() const {
        if (layers < 1) throw ConfigError("offload: layers must be >= 1");
        if (per_layer_compute < 1) throw ConfigError("offload: per_layer_compute must be >= 1");
        if (page_bytes < 1) throw ConfigError("offload: page_bytes must be >= 1");
        if (link_bandwidth < 1) throw ConfigError("offload: link_bandwidth must be >= 1");
        if (fast_tier_capacity < 1) throw ConfigError("offload: fast_tier_capacity must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const OffloadConfig& c) {
    j = {{"layers", c.layers},
         {"per_layer_compute", c.per_layer_compute},
         {"page_bytes", c.page_bytes},
         {"link_bandwidth", c.link_bandwidth},
         {"fast_tier_capacity", c.fast_tier_capacity},
         {"lookahead", c.lookahead}};
}

inline void from_json(const nlohmann::json& j, OffloadConfig& c) {
    c = OffloadConfig{};
    c.layers = j.value("layers", c.layers);
    c.per_layer_compute = j.value("per_layer_compute", c.per_layer_compute);
    c.page_bytes = j.value("page_bytes", c.page_bytes);
    c.link_bandwidth = j.value("link_bandwidth", c.link_bandwidth);
    c.fast_tier_capacity = j.value("fast_tier_capacity", c.fast_tier_capacity);
    c.lookahead = j.value("lookahead", c.lookahead);
}

struct StepLatency {
    SimTime compute = 0;
    SimTime transfer = 0;  // link busy time
    SimTime stall = 0;     // compute engine idle while waiting for pages
    SimTime elapsed = 0;   // compute + stall
    double overlapped_fraction() const {
        return transfer ? static_cast<double>(transfer - stall) / static_cast<double>(transfer) : 0.0;
    }
};

struct LatencyReport {
    Strategy strategy = Strategy::FullResident;
    std::vector<StepLatency> steps;
    StepLatency total;
};

struct StrategyComparison {
    LatencyReport full, on_demand, prefetch;
    double on_demand_over_full() const { return ratio(on_demand, full); }
    double prefetch_over_full() const { return ratio(prefetch, full); }
    double prefetch_over_on_demand() const { return ratio(prefetch, on_demand); }

private:
    static double ratio(const LatencyReport& a, const LatencyReport& b) {
        return static_cast<double>(a.total.elapsed) / static_cast<double>(b.total.elapsed);
    }
};

// LRU set of (layer, head, page) keys.
class LruPages {
public:
    using Key = std::tuple<std::size_t, std::size_t, std::size_t>;

    explicit LruPages(std::size_t capacity) : capacity_(capacity) {}

    bool contains(const Key& k) const { return where_.count(k) != 0; }
    std::size_t size() const noexcept { return where_.size(); }

    // Marks `k` most recently used, inserting it if absent.
    void touch(const Key& k) {
        if (auto it = where_.find(k); it != where_.end()) order_.erase(it->second);
        order_.push_back(k);
        where_[k] = std::prev(order_.end());
    }

    // Evicts least recently used keys not in `pinned` until within capacity.
    void shrink(const std::set<Key>& pinned) {
        for (auto it = order_.begin(); where_.size() > capacity_ && it != order_.end();) {
            if (pinned.count(*it)) {
                ++it;
                continue;
            }
            where_.erase(*it);
            it = order_.erase(it);
        }
    }

private:
    std::size_t capacity_;
    std::list<Key> order_;
    std::map<Key, std::list<Key>::iterator> where_;
};

namespace detail {

// Per layer missing-page counts for every step, advancing residency as it goes.
inline std::vector<std::vector<std::size_t>> missing_pages(const std::vector<StepTrace>& steps, const OffloadConfig& cfg) {
    LruPages res(cfg.fast_tier_capacity);
    std::vector<std::vector<std::size_t>> out;
    out.reserve(steps.size());
    for (std::size_t s = 0; s < steps.size(); ++s) {
        const auto& st = steps[s];
        if (st.layers.size() != cfg.layers)
            throw InputError("offload: step " + std::to_string(s) + " has " + std::to_string(st.layers.size()) +
                             " layers, config expects " + std::to_string(cfg.layers));
        std::set<LruPages::Key> needed;
        for (std::size_t l = 0; l < st.layers.size(); ++l)
            for (const auto& p : st.layers[l]) needed.insert({l, p.head, p.page});
        if (needed.size() > cfg.fast_tier_capacity)
            throw ConfigError("offload: step " + std::to_string(s) + " needs " + std::to_string(needed.size()) +
                              " resident pages, fast_tier_capacity is " + std::to_string(cfg.fast_tier_capacity));
        std::vector<std::size_t> miss(cfg.layers, 0);
        std::set<LruPages::Key> counted;
        for (std::size_t l = 0; l < st.layers.size(); ++l)
            for (const auto& p : st.layers[l]) {
                const LruPages::Key k{l, p.head, p.page};
                if (!res.contains(k) && counted.insert(k).second) ++miss[l];
            }
        for (std::size_t l = 0; l < st.layers.size(); ++l)
            for (const auto& p : st.layers[l]) res.touch({l, p.head, p.page});
        res.shrink(needed);
        out.push_back(std::move(miss));
    }
    return out;
}

}  // namespace detail

inline LatencyReport simulate(Strategy strategy, const std::vector<StepTrace>& steps, const OffloadConfig& cfg) {
    cfg.validate();
    const auto missing = detail::missing_pages(steps, cfg);
    const SimTime c = cfg.per_layer_compute;
    const SimTime tau = cfg.transfer_time();
    const bool overlap = strategy == Strategy::Prefetch && cfg.lookahead;

    LatencyReport rep;
    rep.strategy = strategy;
    for (const auto& miss : missing) {
        StepLatency st;
        st.compute = c * cfg.layers;
        if (strategy == Strategy::FullResident) {
            st.elapsed = st.compute;
        } else if (!overlap) {
            for (std::size_t m : miss) st.transfer += m * tau;
            st.elapsed = st.transfer + st.compute;
        } else {
            // all transfers queued at step start in layer order
            SimTime link = 0, engine = 0;
            for (std::size_t m : miss) {
                link += m * tau;
                const SimTime ready = m ? link : 0;
                engine = std::max(engine, ready) + c;
            }
            st.transfer = link;
            st.elapsed = engine;
        }
        st.stall = st.elapsed - st.compute;
        rep.total.compute += st.compute;
        rep.total.transfer += st.transfer;
        rep.total.stall += st.stall;
        rep.total.elapsed += st.elapsed;
        rep.steps.push_back(st);
    }
    return rep;
}

inline StrategyComparison compare_strategies(const std::vector<StepTrace>& steps, const OffloadConfig& cfg) {
    return {simulate(Strategy::FullResident, steps, cfg), simulate(Strategy::OnDemand, steps, cfg),
            simulate(Strategy::Prefetch, steps, cfg)};
}

// One step per round event; pages as recorded by the verification pass.
inline std::vector<StepTrace> traces_from_events(const std::vector<RoundEvent>& events) {
    std::vector<StepTrace> out;
    out.reserve(events.size());
    for (const auto& e : events) {
        StepTrace st;
        for (const auto& layer : e.pages_touched) {
            std::vector<PageRef> pages;
            for (const auto& [h, p] : layer) pages.push_back({h, p});
            st.layers.push_back(std::move(pages));
        }
        out.push_back(std::move(st));
    }
    return out;
}

// JSON-lines event log as written by `generate`.
inline std::vector<RoundEvent> parse_event_log(std::istream& in) {
    std::vector<RoundEvent> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(round_event_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("event log line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

inline std::string latency_csv(const StrategyComparison& cmp) {
    std::ostringstream os;
    os << "step,strategy,compute,transfer,stall,elapsed\n";
    for (const LatencyReport* r : {&cmp.full, &cmp.on_demand, &cmp.prefetch}) {
        for (std::size_t s = 0; s < r->steps.size(); ++s) {
            const auto& st = r->steps[s];
            os << s << ',' << to_string(r->strategy) << ',' << st.compute << ',' << st.transfer << ',' << st.stall
               << ',' << st.elapsed << '\n';
        }
        const auto& t = r->total;
        os << "total," << to_string(r->strategy) << ',' << t.compute << ',' << t.transfer << ',' << t.stall << ','
           << t.elapsed << '\n';
    }
    return os.str();
}

}  // namespace sts
