// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "kvtier/config.hpp"
#include "kvtier/costmodel.hpp"
#include "kvtier/replay.hpp"
#include "kvtier/stats.hpp"
#include "kvtier/trace_io.hpp"
#include "kvtier/workload.hpp"

namespace kvtier {

// ---------------------------------------------------------------------------
// CSV

inline std::string format_number(double x) {
    if (std::isnan(x)) return "nan";
    if (x == 0.0) return "0";
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return ec == std::errc{} ? std::string(buf, ptr) : std::string("nan");
}

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : m_header(std::move(header)) {}

    class Row {
    public:
        explicit Row(std::size_t width) { m_cells.reserve(width); }
        Row& operator<<(const std::string& s) {
            m_cells.push_back(quote(s));
            return *this;
        }
        Row& operator<<(const char* s) { return *this << std::string(s); }
        Row& operator<<(double x) {
            m_cells.push_back(format_number(x));
            return *this;
        }
        Row& operator<<(std::size_t x) {
            m_cells.push_back(std::to_string(x));
            return *this;
        }
        Row& operator<<(std::int64_t x) {
            m_cells.push_back(std::to_string(x));
            return *this;
        }
        Row& operator<<(bool b) {
            m_cells.push_back(b ? "true" : "false");
            return *this;
        }
        const std::vector<std::string>& cells() const { return m_cells; }

    private:
        static std::string quote(const std::string& s) {
            if (s.find_first_of(",\"\n") == std::string::npos) return s;
            std::string out = "\"";
            for (char c : s) {
                if (c == '"') out += '"';
                out += c;
            }
            return out + "\"";
        }
        std::vector<std::string> m_cells;
    };

    Row row() const { return Row(m_header.size()); }

    void add(const Row& r) {
        require(r.cells().size() == m_header.size(), "csv: row width " + std::to_string(r.cells().size()) +
                                                          " != header width " + std::to_string(m_header.size()));
        m_rows.push_back(r.cells());
    }

    const std::vector<std::string>& header() const { return m_header; }
    std::size_t size() const { return m_rows.size(); }

    std::string str() const {
        std::string out;
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (i) out += ',';
                out += cells[i];
            }
            out += '\n';
        };
        line(m_header);
        for (const auto& r : m_rows) line(r);
        return out;
    }

    void write(const std::filesystem::path& path) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary);
        require(static_cast<bool>(out), "cannot write " + path.string());
        out << str();
    }

private:
    std::vector<std::string> m_header;
    std::vector<std::vector<std::string>> m_rows;
};

// ---------------------------------------------------------------------------
// Experiment configuration

struct WorkloadSpec {
    std::string generator = "longtail";  // longtail | recall | trace
    std::string path;                    // trace file for generator = "trace"
    TraceShape shape;
    double top20_target = 0.565;
    std::size_t needles = 8;
    RecallOptions recall;
};

struct GridSpec {
    std::vector<std::string> policies{"hierarchy"};
    std::vector<std::string> rankings{"cumulative"};
    std::vector<double> betas{0.5};
    std::vector<double> evict_ratios{0.05};
    std::vector<double> budgets{0.5};
    std::vector<std::size_t> windows;    // empty: the [hierarchy] window only
    std::vector<std::size_t> intervals;  // empty: the [hierarchy] interval only
};

struct CostSpec {
    bool calibrated = false;  // a [calibration] table was supplied
    ModelShape model;
    CalibrationPoints points;
    double saturation_tokens = 64;
    double throughput_tok_s = 18.7;
    std::vector<double> latency_tokens{1, 16, 32, 64, 128, 256, 600, 1024};

    TransferModelParams params() const { return calibrate(points, model, saturation_tokens); }
    double per_step_compute() const { return 1.0 / throughput_tok_s; }
};

struct ScenarioSpec {
    DeploymentScenario scenario;
    std::string head_count_kind = "kv";  // which head count n_kv_heads holds
    std::optional<double> reference_kv_gb;
    std::optional<double> reference_kv_fraction;
    std::optional<double> reference_savings_gb;
};

struct GradientSpec {
    bool enabled = false;
    std::size_t instances = 50;
    std::size_t positions = 32;
    std::size_t head_dim = 8;
};

struct ExperimentConfig {
    std::string name = "experiment";
    WorkloadSpec workload;
    HierarchyConfig hierarchy;
    PrefetchMode prefetch = PrefetchMode::differential;
    RkvParams rkv;
    std::size_t baseline_sink = 4;
    std::size_t baseline_window = 128;
    GridSpec grid;
    std::vector<std::uint64_t> seeds{1};
    CostSpec cost;
    std::vector<ScenarioSpec> scenarios;
    GradientSpec gradient;
    std::string inject_fault;  // property-suite negative control
    std::string out_dir = "out";

    void validate() const {
        require(!grid.policies.empty() && !grid.rankings.empty() && !grid.betas.empty() &&
                    !grid.evict_ratios.empty() && !grid.budgets.empty(),
                "config: grid axes must be nonempty");
        require(!seeds.empty(), "config: at least one seed");
        require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(),
                "config: seeds must be distinct");
        require(workload.generator == "longtail" || workload.generator == "recall" || workload.generator == "trace",
                "config: workload.generator must be longtail, recall or trace");
        require(workload.generator != "trace" || !workload.path.empty(), "config: trace workload needs a path");
        require(cost.throughput_tok_s > 0.0, "config: throughput must be positive");
        for (double b : grid.betas) {
            HierarchyConfig h = hierarchy;
            h.beta = b;
            h.validate();
        }
        for (double r : grid.evict_ratios) {
            HierarchyConfig h = hierarchy;
            h.evict_ratio = r;
            h.validate();
        }
        for (double b : grid.budgets) {
            require(b > 0.0 && b <= 1.0, "config: budgets are ratios in (0,1]");
        }
    }
};

inline PolicyKind parse_policy(const std::string& s) {
    if (s == "full") return PolicyKind::full;
    if (s == "hierarchy") return PolicyKind::hierarchy;
    if (s == "streaming") return PolicyKind::streaming;
    if (s == "h2o") return PolicyKind::h2o;
    if (s == "random") return PolicyKind::random;
    throw Error("unknown policy '" + s + "'");
}

inline RankingKind parse_ranking(const std::string& s) {
    if (s == "cumulative") return RankingKind::cumulative;
    if (s == "vatp") return RankingKind::vatp;
    if (s == "redundancy") return RankingKind::redundancy;
    if (s == "combined") return RankingKind::combined;
    if (s == "rkv") return RankingKind::rkv;
    throw Error("unknown ranking '" + s + "'");
}

inline PrefetchMode parse_prefetch(const std::string& s) {
    if (s == "differential") return PrefetchMode::differential;
    if (s == "full_store") return PrefetchMode::full_store;
    throw Error("unknown prefetch mode '" + s + "'");
}

inline const char* prefetch_name(PrefetchMode m) {
    return m == PrefetchMode::differential ? "differential" : "full_store";
}

namespace detail {

inline void reject_unknown(const ConfigTable& t, const std::set<std::string>& known) {
    for (const auto& [key, _] : t.values()) {
        require(known.contains(key), "config [" + t.name + "]: unknown key '" + key + "'");
    }
}

inline ModelShape model_from(const ConfigTable& t, ModelShape m) {
    m.n_layers = t.get_size("layers", m.n_layers);
    m.n_kv_heads = t.get_size("kv_heads", m.n_kv_heads);
    m.head_dim = t.get_size("head_dim", m.head_dim);
    m.bytes_per_element = t.get_size("bytes_per_element", m.bytes_per_element);
    return m;
}

}  // namespace detail

inline ExperimentConfig experiment_from(const ConfigDocument& doc) {
    for (const auto& [name, _] : doc.tables) {
        static const std::set<std::string> known{"",      "experiment",  "workload", "hierarchy", "grid",
                                                 "model", "calibration", "cost",     "gradient",  "properties"};
        require(known.contains(name), "config: unknown table [" + name + "]");
    }
    for (const auto& [name, _] : doc.table_arrays) {
        require(name == "scenario", "config: unknown table array [[" + name + "]]");
    }
    require(doc.table("").values().empty(), "config: keys must live inside a table");

    ExperimentConfig c;
    const auto& ex = doc.table("experiment");
    detail::reject_unknown(ex, {"name", "seeds", "out_dir"});
    c.name = ex.get_string("name", c.name);
    c.out_dir = ex.get_string("out_dir", c.out_dir);
    c.seeds.clear();
    for (auto s : ex.get_ints("seeds", {1})) {
        require(s >= 0, "config: seeds must be nonnegative");
        c.seeds.push_back(static_cast<std::uint64_t>(s));
    }

    const auto& w = doc.table("workload");
    detail::reject_unknown(w, {"generator", "path", "layers", "heads", "head_dim", "prompt_len", "chain_len",
                               "top20_target", "needles", "needle_spacing", "query_period", "needle_logit"});
    c.workload.generator = w.get_string("generator", c.workload.generator);
    c.workload.path = w.get_string("path", "");
    auto& shape = c.workload.shape;
    shape.n_layers = w.get_size("layers", shape.n_layers);
    shape.n_heads = w.get_size("heads", shape.n_heads);
    shape.head_dim = w.get_size("head_dim", shape.head_dim);
    shape.prompt_len = w.get_size("prompt_len", shape.prompt_len);
    shape.chain_len = w.get_size("chain_len", shape.chain_len);
    c.workload.top20_target = w.get_double("top20_target", c.workload.top20_target);
    c.workload.needles = w.get_size("needles", c.workload.needles);
    c.workload.recall.needle_spacing = w.get_size("needle_spacing", c.workload.recall.needle_spacing);
    c.workload.recall.query_period = w.get_size("query_period", c.workload.recall.query_period);
    c.workload.recall.needle_logit = w.get_double("needle_logit", c.workload.recall.needle_logit);

    const auto& h = doc.table("hierarchy");
    detail::reject_unknown(h, {"beta", "evict_ratio", "manage_interval", "sink_size", "window_size", "t2_enabled",
                               "t2_fraction", "t_max", "prefetch", "rkv_lambda", "rkv_window", "rkv_pool_kernel",
                               "baseline_sink", "baseline_window"});
    c.hierarchy.beta = h.get_double("beta", c.hierarchy.beta);
    c.hierarchy.evict_ratio = h.get_double("evict_ratio", c.hierarchy.evict_ratio);
    c.hierarchy.manage_interval = h.get_size("manage_interval", c.hierarchy.manage_interval);
    c.hierarchy.sink_size = h.get_size("sink_size", c.hierarchy.sink_size);
    c.hierarchy.window_size = h.get_size("window_size", c.hierarchy.window_size);
    c.hierarchy.t2_enabled = h.get_bool("t2_enabled", c.hierarchy.t2_enabled);
    c.hierarchy.t2_fraction = h.get_double("t2_fraction", c.hierarchy.t2_fraction);
    c.hierarchy.t_max = h.get_size("t_max", c.hierarchy.t_max);
    c.prefetch = parse_prefetch(h.get_string("prefetch", prefetch_name(c.prefetch)));
    c.rkv.lambda = h.get_double("rkv_lambda", c.rkv.lambda);
    c.rkv.alpha_window = h.get_size("rkv_window", c.rkv.alpha_window);
    c.rkv.pool_kernel = h.get_size("rkv_pool_kernel", c.rkv.pool_kernel);
    c.baseline_sink = h.get_size("baseline_sink", c.hierarchy.sink_size);
    c.baseline_window = h.get_size("baseline_window", c.hierarchy.window_size);
    c.workload.recall.sink_size = c.hierarchy.sink_size;
    c.workload.recall.window_size = c.hierarchy.window_size;

    const auto& g = doc.table("grid");
    detail::reject_unknown(g, {"policies", "rankings", "beta", "evict_ratio", "budget", "window_size", "manage_interval"});
    c.grid.policies = g.get_strings("policies", c.grid.policies);
    c.grid.rankings = g.get_strings("rankings", c.grid.rankings);
    c.grid.betas = g.get_doubles("beta", {c.hierarchy.beta});
    c.grid.evict_ratios = g.get_doubles("evict_ratio", {c.hierarchy.evict_ratio});
    c.grid.budgets = g.get_doubles("budget", c.grid.budgets);
    for (auto w : g.get_ints("window_size", {})) {
        require(w >= 0, "config [grid] window_size must be nonnegative");
        c.grid.windows.push_back(static_cast<std::size_t>(w));
    }
    for (auto i : g.get_ints("manage_interval", {})) {
        require(i > 0, "config [grid] manage_interval must be positive");
        c.grid.intervals.push_back(static_cast<std::size_t>(i));
    }
    for (const auto& p : c.grid.policies) parse_policy(p);
    for (const auto& r : c.grid.rankings) parse_ranking(r);

    const auto& m = doc.table("model");
    detail::reject_unknown(m, {"layers", "kv_heads", "head_dim", "bytes_per_element"});
    c.cost.model = detail::model_from(m, c.cost.model);

    c.cost.calibrated = doc.has_table("calibration");
    const auto& cal = doc.table("calibration");
    detail::reject_unknown(cal, {"gpu_to_cpu_tokens", "gpu_to_cpu_ms", "cpu_to_gpu_tokens", "cpu_to_gpu_ms",
                                 "saturation_tokens"});
    auto pair_of = [&](const std::string& tokens_key, const std::string& ms_key, LatencyPoint a, LatencyPoint b) {
        const auto tokens = cal.get_doubles(tokens_key, {a.tokens, b.tokens});
        const auto ms = cal.get_doubles(ms_key, {a.seconds * 1e3, b.seconds * 1e3});
        require(tokens.size() == 2 && ms.size() == 2, "config [calibration]: exactly two points per direction");
        return std::pair{LatencyPoint{tokens[0], ms[0] * 1e-3}, LatencyPoint{tokens[1], ms[1] * 1e-3}};
    };
    std::tie(c.cost.points.gpu_to_cpu_small, c.cost.points.gpu_to_cpu_large) =
        pair_of("gpu_to_cpu_tokens", "gpu_to_cpu_ms", c.cost.points.gpu_to_cpu_small, c.cost.points.gpu_to_cpu_large);
    std::tie(c.cost.points.cpu_to_gpu_small, c.cost.points.cpu_to_gpu_large) =
        pair_of("cpu_to_gpu_tokens", "cpu_to_gpu_ms", c.cost.points.cpu_to_gpu_small, c.cost.points.cpu_to_gpu_large);
    c.cost.saturation_tokens = cal.get_double("saturation_tokens", c.cost.saturation_tokens);

    const auto& cost = doc.table("cost");
    detail::reject_unknown(cost, {"throughput_tok_s", "latency_tokens"});
    c.cost.throughput_tok_s = cost.get_double("throughput_tok_s", c.cost.throughput_tok_s);
    c.cost.latency_tokens = cost.get_doubles("latency_tokens", c.cost.latency_tokens);

    for (const auto& s : doc.array("scenario")) {
        detail::reject_unknown(s, {"name", "layers", "kv_heads", "head_dim", "bytes_per_element", "head_count_kind",
                                   "batch", "seq_len", "weight_gb", "offload_fraction", "reference_kv_gb",
                                   "reference_kv_fraction", "reference_savings_gb"});
        ScenarioSpec spec;
        spec.scenario.name = s.get_string("name", "scenario");
        spec.scenario.shape = detail::model_from(s, ModelShape{});
        spec.head_count_kind = s.get_string("head_count_kind", spec.head_count_kind);
        spec.scenario.batch = s.get_size("batch", spec.scenario.batch);
        spec.scenario.seq_len = s.get_size("seq_len", spec.scenario.seq_len);
        spec.scenario.weight_bytes = s.get_double("weight_gb", 0.0) * gib;
        spec.scenario.offload_fraction = s.get_double("offload_fraction", spec.scenario.offload_fraction);
        if (s.contains("reference_kv_gb")) spec.reference_kv_gb = s.get_double("reference_kv_gb", 0.0);
        if (s.contains("reference_kv_fraction")) spec.reference_kv_fraction = s.get_double("reference_kv_fraction", 0.0);
        if (s.contains("reference_savings_gb")) spec.reference_savings_gb = s.get_double("reference_savings_gb", 0.0);
        spec.scenario.validate();
        c.scenarios.push_back(spec);
    }

    const auto& gr = doc.table("gradient");
    detail::reject_unknown(gr, {"instances", "positions", "head_dim"});
    c.gradient.enabled = doc.has_table("gradient");
    c.gradient.instances = gr.get_size("instances", c.gradient.instances);
    c.gradient.positions = gr.get_size("positions", c.gradient.positions);
    c.gradient.head_dim = gr.get_size("head_dim", c.gradient.head_dim);

    const auto& pr = doc.table("properties");
    detail::reject_unknown(pr, {"inject_fault"});
    c.inject_fault = pr.get_string("inject_fault", "");

    c.validate();
    return c;
}

inline ExperimentConfig load_experiment(const std::string& path) { return experiment_from(load_config(path)); }

// ---------------------------------------------------------------------------
// Workloads

struct GeneratedWorkload {
    RecallWorkload data;  // task is empty unless the generator is "recall"
    bool has_recall = false;
    double exponent = 0.0;
    double realized_share = 0.0;
};

inline GeneratedWorkload make_workload(const WorkloadSpec& spec, std::uint64_t seed) {
    GeneratedWorkload out;
    if (spec.generator == "recall") {
        out.data = gen_recall_task(spec.shape, spec.needles, seed, spec.recall);
        out.has_recall = true;
    } else if (spec.generator == "longtail") {
        auto lt = gen_longtail_trace(spec.shape, spec.top20_target, seed);
        out.data.workload = std::move(lt.workload);
        out.exponent = lt.exponent;
        out.realized_share = lt.realized_share;
    } else {
        out.data.workload = load_any_trace(spec.path);
    }
    if (!out.has_recall) {
        out.realized_share = measure_concentration(cumulative_scores(out.data.workload.trace).s, 0.2);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Grid

struct GridCell {
    PolicyKind policy = PolicyKind::hierarchy;
    RankingKind ranking = RankingKind::cumulative;
    double beta = 0.0;
    double evict_ratio = 0.0;
    double budget = 0.0;
    std::size_t window = 0;    // 0 keeps the configured value
    std::size_t interval = 0;

    std::string key() const {
        std::string k = policy_name(policy);
        if (policy == PolicyKind::hierarchy) {
            k += std::string("/") + ranking_name(ranking) + "/beta=" + format_number(beta) +
                 "/r=" + format_number(evict_ratio);
            if (window) k += "/window=" + std::to_string(window);
            if (interval) k += "/interval=" + std::to_string(interval);
        } else if (policy != PolicyKind::full) {
            k += "/budget=" + format_number(budget);
        }
        return k;
    }
};

inline std::vector<GridCell> grid_cells(const ExperimentConfig& c) {
    std::vector<GridCell> cells;
    const std::vector<std::size_t> windows = c.grid.windows.empty() ? std::vector<std::size_t>{0} : c.grid.windows;
    const std::vector<std::size_t> intervals = c.grid.intervals.empty() ? std::vector<std::size_t>{0} : c.grid.intervals;
    for (const auto& p : c.grid.policies) {
        GridCell cell;
        cell.policy = parse_policy(p);
        if (cell.policy == PolicyKind::hierarchy) {
            for (const auto& r : c.grid.rankings) {
                for (double ev : c.grid.evict_ratios) {
                    for (double b : c.grid.betas) {
                        for (std::size_t win : windows) {
                            for (std::size_t iv : intervals) {
                                cell.ranking = parse_ranking(r);
                                cell.beta = b;
                                cell.evict_ratio = ev;
                                cell.window = win;
                                cell.interval = iv;
                                cells.push_back(cell);
                            }
                        }
                    }
                }
            }
        } else if (cell.policy == PolicyKind::full) {
            cells.push_back(cell);
        } else {
            for (double b : c.grid.budgets) {
                cell.budget = b;
                cells.push_back(cell);
            }
        }
    }
    return cells;
}

inline PolicySpec policy_for(const ExperimentConfig& c, const GridCell& cell, std::uint64_t seed) {
    PolicySpec p;
    p.kind = cell.policy;
    p.hierarchy = c.hierarchy;
    p.hierarchy.beta = cell.beta > 0.0 ? cell.beta : c.hierarchy.beta;
    p.hierarchy.evict_ratio = cell.policy == PolicyKind::hierarchy ? cell.evict_ratio : c.hierarchy.evict_ratio;
    if (cell.window) p.hierarchy.window_size = cell.window;
    if (cell.interval) p.hierarchy.manage_interval = cell.interval;
    p.ranking = cell.ranking;
    p.rkv = c.rkv;
    p.prefetch = c.prefetch;
    p.budget.budget_ratio = cell.budget;
    p.budget.rng_seed = mix_seed(seed, 0x72616e64);
    p.budget.sink_size = c.baseline_sink;
    p.budget.window_size = c.baseline_window;
    return p;
}

inline TransferSchedule transfer_schedule(const ReplayResult& r) {
    TransferSchedule s;
    s.steps = r.steps.size();
    for (const auto& st : r.steps) {
        if (st.offload_tokens > 0 || st.prefetch_tokens > 0) {
            s.events.push_back({st.step, st.offload_tokens, st.prefetch_tokens});
        }
    }
    return s;
}

/// Bytes of one T2 token: full-precision keys, int8 values plus one fp32 scale per head.
inline std::uint64_t compressed_token_bytes(const ModelShape& m) {
    return static_cast<std::uint64_t>(m.n_layers) * m.n_kv_heads * (m.head_dim * m.bytes_per_element + m.head_dim + 4);
}

struct GridRun {
    GridCell cell;
    std::uint64_t seed = 0;
    std::string status = "ok";
    ReplayResult result;
    double overhead = 0.0;
};

struct GridOutput {
    CsvTable rows;
    CsvTable summary;
    std::vector<GridRun> runs;
};

namespace detail {

/// Runs `n` independent jobs on up to `jobs` threads; job i writes only slot i.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& f) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) f(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace detail

inline const std::vector<std::string>& grid_header() {
    static const std::vector<std::string> h{
        "cell",           "policy",          "ranking",           "beta",
        "evict_ratio",    "budget_ratio",    "seed",              "steps",
        "recall",         "recall_successes", "recall_trials",    "max_error",
        "bound_violations", "residual_bound_violations", "manage_events", "evicted_tokens",
        "evicted_fraction", "final_t0",      "final_t1",          "final_t2",
        "final_t3",       "offload_tokens",  "prefetch_tokens",   "overhead_fraction",
        "status"};
    return h;
}

/**
 * Every (cell, seed) replay of the configured workload. Rows come out in
 * cell order, then seed order, regardless of `jobs`.
 */
inline GridOutput run_grid(const ExperimentConfig& c, std::size_t jobs = 1) {
    c.validate();
    const auto cells = grid_cells(c);
    std::vector<std::unique_ptr<GeneratedWorkload>> workloads(c.seeds.size());
    std::vector<std::string> workload_errors(c.seeds.size());
    detail::parallel_for(c.seeds.size(), jobs, [&](std::size_t i) {
        try {
            workloads[i] = std::make_unique<GeneratedWorkload>(make_workload(c.workload, c.seeds[i]));
        } catch (const std::exception& e) {
            workload_errors[i] = e.what();
        }
    });

    const auto params = c.cost.params();
    const auto bpt = per_token_kv_bytes(c.cost.model);
    std::vector<GridRun> runs(cells.size() * c.seeds.size());
    detail::parallel_for(runs.size(), jobs, [&](std::size_t i) {
        GridRun& run = runs[i];
        run.cell = cells[i / c.seeds.size()];
        const std::size_t s = i % c.seeds.size();
        run.seed = c.seeds[s];
        if (!workloads[s]) {
            run.status = "error: " + workload_errors[s];
            return;
        }
        try {
            ReplayOptions opt;
            opt.bytes_per_token = bpt;
            opt.compressed_bytes_per_token = compressed_token_bytes(c.cost.model);
            if (workloads[s]->has_recall) opt.recall = &workloads[s]->data.task;
            run.result = replay(workloads[s]->data.workload, policy_for(c, run.cell, run.seed), opt);
            run.overhead = overhead_fraction(transfer_schedule(run.result), c.cost.per_step_compute(), c.cost.model, params);
        } catch (const std::exception& e) {
            run.status = std::string("error: ") + e.what();
        }
    });

    GridOutput out{CsvTable(grid_header()),
                   CsvTable({"cell", "policy", "ranking", "beta", "evict_ratio", "budget_ratio", "runs",
                             "recall_successes", "recall_trials", "recall", "recall_pct", "recall_ci_low_pct",
                             "recall_ci_high_pct", "mean_evicted_fraction", "max_error", "bound_violations",
                             "mean_overhead_fraction", "warning"}),
                   {}};
    for (const auto& run : runs) {
        const auto& r = run.result;
        const bool ok = run.status == "ok";
        std::size_t offload = 0, prefetch = 0;
        for (const auto& st : r.steps) {
            offload += st.offload_tokens;
            prefetch += st.prefetch_tokens;
        }
        const TierCensus last = ok && !r.steps.empty() ? r.steps.back().census : TierCensus{};
        auto row = out.rows.row();
        row << run.cell.key() << policy_name(run.cell.policy)
            << (run.cell.policy == PolicyKind::hierarchy ? ranking_name(run.cell.ranking) : "")
            << run.cell.beta << run.cell.evict_ratio << run.cell.budget << static_cast<std::size_t>(run.seed)
            << r.steps.size() << (r.recall_trials ? r.recall() : std::nan("")) << r.recall_successes
            << r.recall_trials << r.max_error << r.bound_violations << r.residual_bound_violations
            << r.manage_events << r.evicted_total << r.evicted_fraction() << last.counts[0] << last.counts[1]
            << last.counts[2] << last.counts[3] << offload << prefetch << run.overhead << run.status;
        out.rows.add(row);
    }

    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        std::size_t k = 0, n = 0, ok_runs = 0, violations = 0;
        double evicted = 0.0, max_error = 0.0, overhead = 0.0;
        for (std::size_t s = 0; s < c.seeds.size(); ++s) {
            const auto& run = runs[ci * c.seeds.size() + s];
            if (run.status != "ok") continue;
            ++ok_runs;
            k += run.result.recall_successes;
            n += run.result.recall_trials;
            evicted += run.result.evicted_fraction();
            max_error = std::max(max_error, run.result.max_error);
            violations += run.result.bound_violations;
            overhead += run.overhead;
        }
        const GridCell& cell = cells[ci];
        auto row = out.summary.row();
        row << cell.key() << policy_name(cell.policy)
            << (cell.policy == PolicyKind::hierarchy ? ranking_name(cell.ranking) : "") << cell.beta
            << cell.evict_ratio << cell.budget << ok_runs << k << n;
        if (ok_runs == 0) {
            const double nan = std::nan("");
            row << nan << nan << nan << nan << nan << nan << violations << nan << "no successful runs; skipped";
        } else {
            const double runs_d = static_cast<double>(ok_runs);
            if (n > 0) {
                const auto iv = clopper_pearson(static_cast<std::int64_t>(k), static_cast<std::int64_t>(n));
                const double est = static_cast<double>(k) / static_cast<double>(n);
                row << est << round_half_away(100.0 * est) << round_half_away(100.0 * iv.lower)
                    << round_half_away(100.0 * iv.upper);
            } else {
                const double nan = std::nan("");
                row << nan << nan << nan << nan;
            }
            row << evicted / runs_d << max_error << violations << overhead / runs_d << "";
        }
        out.summary.add(row);
    }
    out.runs = std::move(runs);
    return out;
}

// ---------------------------------------------------------------------------
// Costs

struct CostReport {
    CsvTable scaling;
    CsvTable overhead;
    CsvTable latency;
};

inline CsvTable scaling_table(const std::vector<ScenarioSpec>& scenarios) {
    CsvTable t({"scenario", "n_layers", "n_kv_heads", "head_count_kind", "head_dim", "bytes_per_element", "batch",
                "seq_len", "per_token_kv_bytes", "kv_bytes", "kv_gib", "weight_gib", "kv_fraction", "kv_fraction_pct",
                "offload_fraction", "savings_gib", "reference_kv_gb", "reference_kv_fraction", "reference_savings_gb",
                "kv_deviation_pct", "fraction_deviation_pts", "flag"});
    const double nan = std::nan("");
    for (const auto& spec : scenarios) {
        const auto& s = spec.scenario;
        const auto p = scaling_projection(s);
        const double kv_gib = p.kv_bytes / gib;
        const double kv_dev = spec.reference_kv_gb ? 100.0 * (kv_gib - *spec.reference_kv_gb) / *spec.reference_kv_gb : nan;
        const double frac_dev = spec.reference_kv_fraction ? 100.0 * (p.kv_fraction - *spec.reference_kv_fraction) : nan;
        std::string flag;
        if (spec.reference_kv_gb && std::abs(kv_dev) > 10.0) flag = "kv differs from reference by more than 10%";
        auto row = t.row();
        row << s.name << s.shape.n_layers << s.shape.n_kv_heads << spec.head_count_kind << s.shape.head_dim
            << s.shape.bytes_per_element << s.batch << s.seq_len << per_token_kv_bytes(s.shape) << p.kv_bytes << kv_gib
            << s.weight_bytes / gib << p.kv_fraction << round_half_away(100.0 * p.kv_fraction) << s.offload_fraction
            << p.savings_bytes / gib << spec.reference_kv_gb.value_or(nan) << spec.reference_kv_fraction.value_or(nan)
            << spec.reference_savings_gb.value_or(nan) << kv_dev << frac_dev << flag;
        t.add(row);
    }
    return t;
}

inline CsvTable latency_table(const CostSpec& cost) {
    CsvTable t({"direction", "tokens", "bytes", "latency_ms", "effective_bandwidth_gbps"});
    const auto params = cost.params();
    const auto bpt = per_token_kv_bytes(cost.model);
    for (Direction d : {Direction::gpu_to_cpu, Direction::cpu_to_gpu}) {
        for (double n : cost.latency_tokens) {
            const double sec = transfer_latency(n, cost.model, d, params);
            const double bytes = n * static_cast<double>(bpt);
            auto row = t.row();
            row << direction_name(d) << n << bytes << sec * 1e3 << (sec > 0 ? bytes / sec / 1e9 : 0.0);
            t.add(row);
        }
    }
    return t;
}

/// Scaling projections, transfer latencies and per-run overhead fractions.
inline CostReport report_costs(const ExperimentConfig& c, std::size_t jobs = 1) {
    require(c.cost.calibrated, "report-costs: config has no [calibration] table");
    const auto params = c.cost.params();
    CostReport rep{scaling_table(c.scenarios),
                   CsvTable({"cell", "seed", "prefetch", "chain_len", "per_step_compute_ms", "transfer_ms",
                             "compute_ms", "transfers", "overhead_fraction", "overhead_pct", "evicted_fraction",
                             "calibration", "gpu_to_cpu_bandwidth_gbps", "gpu_to_cpu_fixed_latency_ms",
                             "cpu_to_gpu_bandwidth_gbps", "cpu_to_gpu_fixed_latency_ms", "saturation_tokens",
                             "status"}),
                   latency_table(c.cost)};

    ExperimentConfig hier = c;
    hier.grid.policies = {"hierarchy"};
    hier.grid.rankings = {c.grid.rankings.front()};
    const auto grid = run_grid(hier, jobs);
    std::ostringstream provenance;
    provenance << "two-point fit: g2c " << c.cost.points.gpu_to_cpu_small.tokens << "/"
               << c.cost.points.gpu_to_cpu_small.seconds * 1e3 << "ms " << c.cost.points.gpu_to_cpu_large.tokens << "/"
               << c.cost.points.gpu_to_cpu_large.seconds * 1e3 << "ms; c2g " << c.cost.points.cpu_to_gpu_small.tokens
               << "/" << c.cost.points.cpu_to_gpu_small.seconds * 1e3 << "ms " << c.cost.points.cpu_to_gpu_large.tokens
               << "/" << c.cost.points.cpu_to_gpu_large.seconds * 1e3 << "ms";
    for (const auto& run : grid.runs) {
        auto row = rep.overhead.row();
        const bool ok = run.status == "ok";
        const auto b = ok ? overhead_breakdown(transfer_schedule(run.result), c.cost.per_step_compute(), c.cost.model,
                                               params)
                          : OverheadBreakdown{};
        const double frac = ok ? b.fraction() : std::nan("");
        row << run.cell.key() << static_cast<std::size_t>(run.seed) << prefetch_name(c.prefetch)
            << c.workload.shape.chain_len << c.cost.per_step_compute() * 1e3 << b.transfer_seconds * 1e3
            << b.compute_seconds * 1e3 << b.transfers << frac << 100.0 * frac << run.result.evicted_fraction()
            << provenance.str() << params.gpu_to_cpu.bandwidth / 1e9 << params.gpu_to_cpu.fixed_latency * 1e3
            << params.cpu_to_gpu.bandwidth / 1e9 << params.cpu_to_gpu.fixed_latency * 1e3 << params.saturation_tokens
            << run.status;
        rep.overhead.add(row);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Census and gradient study

/// Per-step tier counts of the first hierarchy cell on the first seed.
inline CsvTable census(const ExperimentConfig& c) {
    c.validate();
    GridCell cell;
    cell.policy = PolicyKind::hierarchy;
    cell.ranking = parse_ranking(c.grid.rankings.front());
    cell.beta = c.grid.betas.front();
    cell.evict_ratio = c.grid.evict_ratios.front();
    const auto w = make_workload(c.workload, c.seeds.front());
    ReplayOptions opt;
    opt.compute_outputs = false;
    opt.bytes_per_token = per_token_kv_bytes(c.cost.model);
    opt.compressed_bytes_per_token = compressed_token_bytes(c.cost.model);
    const auto r = replay(w.data.workload, policy_for(c, cell, c.seeds.front()), opt);
    CsvTable t({"step", "t0", "t1", "t2", "t3", "visible_bytes", "cpu_bytes"});
    for (const auto& st : r.steps) {
        auto row = t.row();
        row << st.census.step << st.census.counts[0] << st.census.counts[1] << st.census.counts[2]
            << st.census.counts[3] << st.census.visible_bytes << st.census.cpu_bytes;
        t.add(row);
    }
    return t;
}

struct GradientStudy {
    CsvTable rows{{"seed", "instance", "positions", "head_dim", "spearman_rho"}};
    double mean_rho = 0.0;
    double sd_rho = 0.0;
};

/**
 * Rank agreement between attention weight and finite-difference gradient
 * importance on random single-head decode steps with a quadratic loss.
 */
inline GradientStudy gradient_study(const ExperimentConfig& c) {
    GradientStudy out;
    std::vector<double> rhos;
    for (std::uint64_t seed : c.seeds) {
        for (std::size_t i = 0; i < c.gradient.instances; ++i) {
            Rng rng(mix_seed(seed, 0x6772616400ull + i));
            const std::size_t n = c.gradient.positions;
            const std::size_t d = c.gradient.head_dim;
            ToyAttention toy;
            auto draw = [&] {
                Vector v(d);
                for (double& x : v) x = rng.normal();
                return v;
            };
            toy.query = draw();
            for (std::size_t p = 0; p < n; ++p) {
                toy.keys.push_back(draw());
                toy.values.push_back(draw());
            }
            const QuadraticLoss loss{draw()};
            const auto attn = attention_weights(toy.query, toy.keys);
            const auto grad = score_gradient_fd(toy, loss);
            const double rho = spearman_rho(attn, grad.s);
            rhos.push_back(rho);
            auto row = out.rows.row();
            row << static_cast<std::size_t>(seed) << i << n << d << rho;
            out.rows.add(row);
        }
    }
    if (!rhos.empty()) {
        double sum = 0.0;
        for (double r : rhos) sum += r;
        out.mean_rho = sum / static_cast<double>(rhos.size());
        double sq = 0.0;
        for (double r : rhos) sq += (r - out.mean_rho) * (r - out.mean_rho);
        out.sd_rho = rhos.size() > 1 ? std::sqrt(sq / static_cast<double>(rhos.size() - 1)) : 0.0;
    }
    return out;
}

}  // namespace kvtier
