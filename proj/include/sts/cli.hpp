// SPDX-License-Identifier: Apache-2.0

#pragma once

// sts_lab command line: experiment config resolution and the subcommands.
// Exit codes: 0 ok, 1 input/config error, 2 contract violation.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sts/evalkit.hpp"
#include "sts/model_io.hpp"
#include "sts/offloadsim.hpp"
#include "sts/specdec.hpp"
#include "sts/tracestore.hpp"

namespace sts::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// Everything an experiment needs, built from one JSON config.
struct Experiment {
    json resolved;  // config with every seed and default filled in
    fs::path workdir;
    ModelWeights target;
    ModelWeights draft;
    Corpus corpus;
    std::optional<HeadTable<HeadId>> planted;  // draft head -> source target head

    fs::path path(const std::string& p) const { return workdir / p; }
};

namespace detail {

template <typename T>
T field(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

}  // namespace detail

inline Experiment load_experiment(const fs::path& config_path, const fs::path& workdir,
                                  std::optional<std::uint64_t> seed) {
    const fs::path full = workdir / config_path;
    if (!fs::exists(full)) throw InputError("config file not found: " + full.string());
    json cfg = io::read_json(full);
    if (!cfg.is_object()) throw ConfigError(full.string() + ": config must be a JSON object");

    Experiment ex;
    ex.workdir = workdir;
    if (!seed && cfg.contains("seed")) seed = detail::field<std::uint64_t>(cfg, "seed", 0);

    try {
        ModelConfig tc = cfg.contains("target") ? cfg.at("target").get<ModelConfig>() : ModelConfig{};
        if (seed) tc.seed = *seed;
        json draft_j = cfg.value("draft", json::object());
        json merged = tc;
        for (auto it = draft_j.begin(); it != draft_j.end(); ++it) merged[it.key()] = it.value();
        ModelConfig dc = merged.get<ModelConfig>();
        dc.seed = seed ? *seed + 1 : (draft_j.contains("seed") ? dc.seed : tc.seed + 1);

        if (cfg.contains("weights")) {
            const json& wj = cfg.at("weights");
            ex.target = load_weights(ex.path(wj.at("target").get<std::string>()));
            ex.draft = load_weights(ex.path(wj.at("draft").get<std::string>()));
            cfg["target"] = ex.target.config;
            cfg["draft"] = ex.draft.config;
        } else if (cfg.contains("planted") && !cfg.at("planted").is_null()) {
            const json& pj = cfg.at("planted");
            PlantedPairConfig pc;
            pc.target = tc;
            pc.draft_layers = dc.layers;
            pc.perturbation = detail::field(pj, "perturbation", pc.perturbation);
            pc.residual_gain = detail::field(pj, "residual_gain", 0.3);
            PlantedPair pp = planted_pair(pc);
            ex.target = std::move(pp.target);
            ex.draft = std::move(pp.draft);
            ex.planted = std::move(pp.source);
            cfg["planted"] = {{"perturbation", pc.perturbation}, {"residual_gain", pc.residual_gain}};
            cfg["target"] = ex.target.config;
            cfg["draft"] = ex.draft.config;
        } else {
            tc.validate();
            dc.validate();
            ex.target = init_model(tc);
            ex.draft = init_model(dc);
            cfg["target"] = tc;
            cfg["draft"] = dc;
        }

        json cj = cfg.value("corpus", json::object());
        if (cj.contains("token_file")) {
            ex.corpus = load_token_file(ex.path(cj.at("token_file").get<std::string>()), ex.target.config.vocab);
        } else {
            CorpusSpec cs = cj.get<CorpusSpec>();
            if (seed)
                cs.seed = *seed + 2;
            else if (!cj.contains("seed"))
                cs.seed = ex.target.config.seed + 2;
            ex.corpus = synthetic_corpus(cs, ex.target.config.vocab);
            cfg["corpus"] = cs;
        }
    } catch (const json::exception& e) {
        throw ConfigError(full.string() + ": " + e.what());
    }
    if (seed) cfg["seed"] = *seed;
    ex.resolved = std::move(cfg);
    return ex;
}

// Mapping from the config's "mapping" file, or built from corpus traces.
inline HeadMapping experiment_mapping(const Experiment& ex, std::size_t default_k) {
    const json& c = ex.resolved;
    if (c.contains("mapping") && c.at("mapping").is_string()) {
        HeadMapping m = load_mapping(ex.path(c.at("mapping").get<std::string>()));
        sts::detail::check_mapping(m, ex.draft.config, ex.target.config);
        return m;
    }
    const std::size_t k = detail::field<std::size_t>(c, "mapping_k", default_k);
    const TraceSet ts = c.contains("traces") ? load_traces(ex.path(c.at("traces").get<std::string>()))
                                             : collect_traces(ex.draft, ex.target, ex.corpus);
    return find_head_mapping(ts, k);
}

inline std::optional<SparsityConfig> experiment_sparsity(const json& c) {
    if (!c.contains("sparsity") || c.at("sparsity").is_null()) return std::nullopt;
    try {
        return c.at("sparsity").get<SparsityConfig>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field 'sparsity': ") + e.what());
    }
}

inline std::string csv_header(const Experiment& ex) { return "# config: " + ex.resolved.dump() + "\n"; }

struct RunOptions {
    fs::path config;
    fs::path out;
    fs::path workdir = ".";
    std::optional<std::uint64_t> seed;
    bool oracle_check = false;
    fs::path events;     // generate: JSON-lines round log
    fs::path mask_dump;  // generate: JSON-lines mask dump
};

inline fs::path out_path(const RunOptions& o) { return o.workdir / o.out; }

inline void write_report(const RunOptions& o, const std::string& body) { io::write_text(out_path(o), body); }

inline int cmd_trace(const RunOptions& o, std::ostream& log) {
    const Experiment ex = load_experiment(o.config, o.workdir, o.seed);
    const TraceSet ts = collect_traces(ex.draft, ex.target, ex.corpus);
    fs::create_directories(out_path(o));
    json manifest = save_traces(ts, out_path(o));
    io::write_text(out_path(o) / "experiment.json", ex.resolved.dump(2) + "\n");
    log << "traces: " << ts.samples.size() << " samples, id " << manifest.at("trace_set_id").get<std::string>() << "\n";
    return 0;
}

inline int cmd_map(const RunOptions& o, std::ostream& log) {
    const Experiment ex = load_experiment(o.config, o.workdir, o.seed);
    const std::size_t k = detail::field<std::size_t>(ex.resolved, "k", 8);
    if (k < 1) throw ConfigError("map: k must be >= 1");
    std::string id;
    TraceSet ts;
    if (ex.resolved.contains("traces")) {
        const fs::path dir = ex.path(ex.resolved.at("traces").get<std::string>());
        ts = load_traces(dir);
        id = io::read_json(dir / "manifest.json").value("trace_set_id", std::string{});
    } else {
        ts = collect_traces(ex.draft, ex.target, ex.corpus);
    }
    const HeadMapping m = find_head_mapping(ts, k, id);
    json j = mapping_to_json(m);
    j["experiment"] = ex.resolved;
    write_report(o, j.dump(2) + "\n");
    const auto st = layer_distance_stats(m);
    log << "mapping k=" << k << " written, mean |layer distance| " << detail::fmt(st.mean_abs) << "\n";
    return 0;
}

inline int cmd_generate(const RunOptions& o, std::ostream& log) {
    const Experiment ex = load_experiment(o.config, o.workdir, o.seed);
    const json& c = ex.resolved;
    SpecConfig sc;
    sc.gamma = detail::field<std::size_t>(c, "gamma", 4);
    sc.sparsity = experiment_sparsity(c);
    const std::size_t max_new = detail::field<std::size_t>(c, "max_new", 32);
    std::vector<TokenId> prompt = detail::field<std::vector<TokenId>>(c, "prompt", {});
    if (prompt.empty()) {
        const std::size_t len = detail::field<std::size_t>(c, "prompt_length", 16);
        const auto& s = ex.corpus.front();
        prompt.assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(len, s.size())));
    }

    std::optional<HeadMapping> mapping;
    if (sc.sparsity) {
        mapping = experiment_mapping(ex, sc.sparsity->budget.is_fraction() ? 8 : sc.sparsity->budget.token_value());
        sc.mapping = &*mapping;
    }
    std::ostringstream dumps;
    if (!o.mask_dump.empty()) sc.mask_dump = [&](const json& j) { dumps << j.dump() << "\n"; };

    const GenerateResult res = generate(ex.draft, ex.target, prompt, max_new, sc);

    json stats = {{"rounds", res.stats.rounds},
                  {"proposed", res.stats.proposed},
                  {"accepted", res.stats.accepted},
                  {"acceptance_rate", res.stats.acceptance_rate()},
                  {"masks_generated", res.stats.masks_generated},
                  {"masks_consumed", res.stats.masks_consumed},
                  {"masks_discarded", res.stats.masks_discarded},
                  {"masks_retained", res.stats.masks_retained},
                  {"prefill_masks", res.stats.prefill_masks}};
    json report = {{"experiment", c}, {"prompt", prompt}, {"tokens", res.tokens}, {"stats", stats}};
    if (mapping) report["mapping_k"] = mapping->k;

    int code = 0;
    if (o.oracle_check) {
        const auto greedy = greedy_decode(ex.target, prompt, max_new);
        const bool ok = greedy == res.tokens;
        report["oracle_check"] = ok ? "match" : "mismatch";
        if (!ok) {
            log << "oracle check failed: output differs from target-only greedy decoding\n";
            code = 1;
        }
    }
    write_report(o, report.dump(2) + "\n");
    if (!o.events.empty()) {
        std::ostringstream ev;
        for (const auto& e : res.events) ev << event_to_json(e).dump() << "\n";
        io::write_text(o.workdir / o.events, ev.str());
    }
    if (!o.mask_dump.empty()) io::write_text(o.workdir / o.mask_dump, dumps.str());
    log << "generated " << res.tokens.size() << " tokens in " << res.stats.rounds << " rounds, acceptance "
        << detail::fmt(res.stats.acceptance_rate()) << "\n";
    return code;
}

inline int cmd_recall(const RunOptions& o, std::ostream& log) {
    const Experiment ex = load_experiment(o.config, o.workdir, o.seed);
    const json& c = ex.resolved;
    RecallOptions ro;
    ro.k = detail::field<std::size_t>(c, "k", 8);
    ro.page_size = detail::field<std::size_t>(c, "page_size", 1);
    ro.first_position = detail::field<std::size_t>(c, "first_position", 0);
    const HeadMapping m = experiment_mapping(ex, ro.k);
    const RecallReport r = mask_recall(ex.draft, ex.target, m, ex.corpus, ro);
    json report = {{"experiment", c},
                   {"k", ro.k},
                   {"mapping_k", m.k},
                   {"recall", r.recall},
                   {"random_baseline", r.random_baseline},
                   {"recall_over_baseline", r.recall / r.random_baseline},
                   {"rows", r.rows},
                   {"per_layer", r.per_layer}};
    write_report(o, report.dump(2) + "\n");
    log << "recall " << detail::fmt(r.recall) << " vs random " << detail::fmt(r.random_baseline) << "\n";
    return 0;
}

inline int cmd_oracle_sparsity(const RunOptions& o, std::ostream& log) {
    const Experiment ex = load_experiment(o.config, o.workdir, o.seed);
    const auto thresholds = detail::field<std::vector<double>>(ex.resolved, "thresholds", {0.01});
    if (thresholds.empty()) throw ConfigError("oracle-sparsity: thresholds must be non-empty");
    std::ostringstream os;
    os << csv_header(ex) << "layer,threshold,budget,ratio,delta_ppl\n";
    for (double t : thresholds) {
        const PrunableReport r = oracle_prunable_ratio(ex.target, ex.corpus, t);
        for (const auto& l : r.layers)
            os << l.layer << ',' << detail::fmt(t) << ',' << l.budget << ',' << detail::fmt(l.ratio) << ','
               << detail::fmt(l.delta_ppl) << '\n';
    }
    write_report(o, os.str());
    log << "oracle prunable ratio for " << thresholds.size() << " threshold(s) written\n";
    return 0;
}

inline int cmd_ppl_curve(const RunOptions& o, std::ostream& log) {
    const Experiment ex = load_experiment(o.config, o.workdir, o.seed);
    const json& c = ex.resolved;
    const auto budgets = detail::field<std::vector<std::size_t>>(c, "budgets", {});
    std::vector<SparsityScope> scopes;
    for (const auto& s : detail::field<std::vector<std::string>>(c, "scopes", {"STS-D", "STS-PD"}))
        scopes.push_back(scope_from_string(s));
    SparsityConfig base = experiment_sparsity(c).value_or(SparsityConfig{});
    const HeadMapping m = experiment_mapping(ex, budgets.empty() ? 8 : budgets.front());
    const PplCurve curve = ppl_vs_budget(ex.draft, ex.target, m, ex.corpus, budgets, scopes, base);
    std::ostringstream os;
    os << csv_header(ex) << "# dense_ppl: " << detail::fmt(curve.dense_ppl) << "\n";
    os << "budget,scope,ppl,delta_ppl\n";
    for (const auto& r : curve.rows)
        os << r.budget << ',' << to_string(r.scope) << ',' << detail::fmt(r.ppl) << ',' << detail::fmt(r.delta_ppl)
           << '\n';
    write_report(o, os.str());
    log << curve.rows.size() << " curve rows written\n";
    return 0;
}

inline int cmd_simulate_offload(const RunOptions& o, std::ostream& log) {
    const Experiment ex = load_experiment(o.config, o.workdir, o.seed);
    const json& c = ex.resolved;
    std::vector<RoundEvent> events;
    if (c.contains("event_log")) {
        const fs::path p = ex.path(c.at("event_log").get<std::string>());
        std::ifstream in(p);
        if (!in) throw InputError("cannot open event log: " + p.string());
        events = parse_event_log(in);
    } else {
        RunOptions gen = o;
        gen.out = o.out.string() + ".generate.json";
        gen.events = o.out.string() + ".events.jsonl";
        gen.oracle_check = false;
        std::ostringstream quiet;
        cmd_generate(gen, quiet);
        std::ifstream in(o.workdir / gen.events);
        events = parse_event_log(in);
    }
    OffloadConfig oc = detail::field<OffloadConfig>(c, "offload", OffloadConfig{});
    oc.layers = ex.target.config.layers;
    if (oc.page_bytes == 0)
        oc.page_bytes = OffloadConfig::default_page_bytes(ex.target.config.page_size, ex.target.config.head_dim);
    const StrategyComparison cmp = compare_strategies(traces_from_events(events), oc);
    write_report(o, csv_header(ex) + latency_csv(cmp));
    log << "ondemand/full " << detail::fmt(cmp.on_demand_over_full()) << ", prefetch/full "
        << detail::fmt(cmp.prefetch_over_full()) << "\n";
    return 0;
}

// Entry point; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Speculative token sparsity lab", "sts_lab"};
    app.require_subcommand(1);
    RunOptions opt;
    std::uint64_t seed = 0;

    struct Sub {
        const char* name;
        const char* help;
        int (*fn)(const RunOptions&, std::ostream&);
    };
    const Sub subs[] = {
        {"trace", "collect draft/target attention traces", cmd_trace},
        {"map", "build a head mapping", cmd_map},
        {"generate", "speculative generation with optional sparse verification", cmd_generate},
        {"recall", "mask recall against the target's dense top-k", cmd_recall},
        {"oracle-sparsity", "layer-wise oracle prunable ratio", cmd_oracle_sparsity},
        {"ppl-curve", "perplexity vs sparsity budget", cmd_ppl_curve},
        {"simulate-offload", "KV offload latency by strategy", cmd_simulate_offload},
    };
    std::vector<std::pair<CLI::App*, const Sub*>> apps;
    for (const Sub& s : subs) {
        CLI::App* sub = app.add_subcommand(s.name, s.help);
        sub->add_option("--config", opt.config, "experiment config (JSON)")->required();
        sub->add_option("--out", opt.out, "output path")->required();
        sub->add_option("--workdir", opt.workdir, "base directory for relative paths");
        sub->add_option("--seed", seed, "override seeds: target=S, draft=S+1, corpus=S+2");
        if (std::string(s.name) == "generate") {
            sub->add_flag("--oracle-check", opt.oracle_check, "fail unless output equals target-only greedy decoding");
            sub->add_option("--events", opt.events, "write the per-round event log (JSON lines)");
            sub->add_option("--mask-dump", opt.mask_dump, "write per-round masks (JSON lines)");
        }
        apps.emplace_back(sub, &s);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        for (const auto& [sub, s] : apps) {
            if (!sub->parsed()) continue;
            if (sub->count("--seed")) opt.seed = seed;
            return s->fn(opt, out);
        }
    } catch (const ContractViolation& e) {
        err << "internal error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const json::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace sts::cli
