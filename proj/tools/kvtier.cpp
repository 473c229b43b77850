// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kvtier/kvtier.hpp"

namespace fs = std::filesystem;
using namespace kvtier;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_usage = 1;
constexpr int exit_property_failure = 2;

struct CommonArgs {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config, "experiment config (TOML)")->required()->check(CLI::ExistingFile);
    cmd->add_option("-o,--out", args.out, "output directory (default: the config's out_dir)");
    cmd->add_option("-s,--seed", args.seed, "run a single seed instead of the configured list");
    cmd->add_option("-j,--jobs", args.jobs, "parallel grid cells")->check(CLI::PositiveNumber);
}

ExperimentConfig load(const CommonArgs& args) {
    ExperimentConfig c = load_experiment(args.config);
    if (args.seed) c.seeds = {*args.seed};
    if (!args.out.empty()) c.out_dir = args.out;
    return c;
}

fs::path out_file(const ExperimentConfig& c, const std::string& suffix) { return fs::path(c.out_dir) / (c.name + suffix); }

void wrote(const fs::path& p) { std::cerr << "wrote " << p.string() << "\n"; }

int gen_trace(const CommonArgs& args, const std::string& format) {
    const auto c = load(args);
    const auto w = make_workload(c.workload, c.seeds.front());
    const bool text = format == "text";
    const fs::path path = out_file(c, text ? "_trace.txt" : "_trace.kvt");
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    if (text) {
        save_trace_text(w.data.workload, path.string());
    } else {
        save_trace(w.data.workload, path.string());
    }
    wrote(path);
    std::cout << "generator=" << c.workload.generator << " seed=" << c.seeds.front()
              << " top20_share=" << format_number(w.realized_share);
    if (c.workload.generator == "longtail") std::cout << " exponent=" << format_number(w.exponent);
    if (w.has_recall) std::cout << " needles=" << w.data.task.needles.size() << " retrievals=" << w.data.task.schedule.size();
    std::cout << "\n";
    return exit_ok;
}

int run_grid_cmd(const CommonArgs& args) {
    const auto c = load(args);
    const auto grid = run_grid(c, args.jobs);
    grid.rows.write(out_file(c, "_grid.csv"));
    wrote(out_file(c, "_grid.csv"));
    grid.summary.write(out_file(c, "_summary.csv"));
    wrote(out_file(c, "_summary.csv"));
    if (c.gradient.enabled) {
        const auto g = gradient_study(c);
        g.rows.write(out_file(c, "_gradient.csv"));
        wrote(out_file(c, "_gradient.csv"));
        std::cout << "spearman attention vs gradient: mean " << format_number(g.mean_rho) << " sd "
                  << format_number(g.sd_rho) << "\n";
    }
    std::size_t failed = 0;
    for (const auto& r : grid.runs) failed += r.status == "ok" ? 0 : 1;
    std::cout << grid.runs.size() << " runs, " << failed << " failed\n";
    return exit_ok;
}

int report_costs_cmd(const CommonArgs& args) {
    const auto c = load(args);
    const auto rep = report_costs(c, args.jobs);
    rep.scaling.write(out_file(c, "_scaling.csv"));
    wrote(out_file(c, "_scaling.csv"));
    rep.latency.write(out_file(c, "_latency.csv"));
    wrote(out_file(c, "_latency.csv"));
    rep.overhead.write(out_file(c, "_overhead.csv"));
    wrote(out_file(c, "_overhead.csv"));
    for (const auto& s : c.scenarios) {
        std::cout << s.scenario.name << ": per-token bytes use n_kv_heads=" << s.scenario.shape.n_kv_heads << " ("
                  << s.head_count_kind << " heads)\n";
    }
    return exit_ok;
}

int validate_props_cmd(const CommonArgs& args, const std::string& fault) {
    auto c = load(args);
    if (!fault.empty()) c.inject_fault = fault;
    const auto rep = validate_props(c);
    const std::string json = rep.to_json().dump(2);
    std::cout << json << "\n";
    if (!args.out.empty()) {
        const auto path = out_file(c, "_props.json");
        fs::create_directories(path.parent_path());
        std::ofstream(path) << json << "\n";
        wrote(path);
    }
    return rep.passed() ? exit_ok : exit_property_failure;
}

int census_cmd(const CommonArgs& args) {
    const auto c = load(args);
    const auto t = census(c);
    t.write(out_file(c, "_census.csv"));
    wrote(out_file(c, "_census.csv"));
    return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kvtier: tiered KV-cache simulator"};
    app.require_subcommand(1);

    CommonArgs gen_args, grid_args, cost_args, prop_args, census_args;
    std::string format = "binary";
    std::string fault;

    auto* gen = app.add_subcommand("gen-trace", "generate a workload and write it as a trace file");
    add_common(gen, gen_args);
    gen->add_option("--format", format, "binary or text")->check(CLI::IsMember({"binary", "text"}));
    auto* grid = app.add_subcommand("run-grid", "replay every grid cell and seed, write CSV");
    add_common(grid, grid_args);
    auto* cost = app.add_subcommand("report-costs", "scaling projections, latencies and overhead fractions");
    add_common(cost, cost_args);
    auto* props = app.add_subcommand("validate-props", "run the invariant suite, print JSON");
    add_common(props, prop_args);
    props->add_option("--inject-fault", fault, "deliberately break one check (negative control)");
    auto* cen = app.add_subcommand("census", "per-step tier counts of one hierarchy run");
    add_common(cen, census_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (gen->parsed()) return gen_trace(gen_args, format);
        if (grid->parsed()) return run_grid_cmd(grid_args);
        if (cost->parsed()) return report_costs_cmd(cost_args);
        if (props->parsed()) return validate_props_cmd(prop_args, fault);
        if (cen->parsed()) return census_cmd(census_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_usage;
    }
    return exit_usage;
}
