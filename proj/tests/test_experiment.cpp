// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "kvtier/experiment.hpp"

using namespace kvtier;
namespace fs = std::filesystem;

namespace {

const char* recall_grid = R"(
[experiment]
name = "recall_grid"
seeds = [7]

[workload]
generator = "recall"
layers = 2
heads = 2
head_dim = 8
prompt_len = 32
chain_len = 512
needles = 6

[grid]
policies = ["full", "hierarchy", "streaming", "h2o"]
beta = [0.3, 0.5, 0.7]
evict_ratio = [0.0, 0.05, 0.1]
budget = [0.5]
)";

std::vector<std::string> column(const CsvTable& t, const std::string& name) {
    std::istringstream in(t.str());
    std::string line;
    std::getline(in, line);
    std::size_t idx = 0;
    for (; idx < t.header().size() && t.header()[idx] != name; ++idx) {
    }
    std::vector<std::string> out;
    while (std::getline(in, line)) {
        std::istringstream cells(line);
        std::string cell;
        for (std::size_t i = 0; i <= idx; ++i) std::getline(cells, cell, ',');
        out.push_back(cell);
    }
    return out;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(KVTIER_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("kvtier_experiment_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Csv, NumbersRoundTripAndStringsAreQuoted) {
    EXPECT_EQ(format_number(0.1), "0.1");
    EXPECT_EQ(format_number(-0.0), "0");
    EXPECT_EQ(format_number(std::nan("")), "nan");
    EXPECT_EQ(std::stod(format_number(1.0 / 3.0)), 1.0 / 3.0);
    CsvTable t({"a", "b"});
    auto r = t.row();
    r << "x,y" << 2.5;
    t.add(r);
    EXPECT_EQ(t.str(), "a,b\n\"x,y\",2.5\n");
    auto bad = t.row();
    bad << 1.0;
    EXPECT_THROW(t.add(bad), Error);
}

TEST(ExperimentConfig, UnknownKeysAndTablesAreRejected) {
    EXPECT_THROW(experiment_from(parse_config("[grid]\nbetas = [0.5]\n")), Error);
    EXPECT_THROW(experiment_from(parse_config("[gird]\n")), Error);
    EXPECT_THROW(experiment_from(parse_config("seed = 1\n")), Error);
    EXPECT_THROW(experiment_from(parse_config("[grid]\npolicies = [\"lru\"]\n")), Error);
    EXPECT_THROW(experiment_from(parse_config("[grid]\nbeta = [0.0]\n")), Error);
    EXPECT_THROW(experiment_from(parse_config("[experiment]\nseeds = [1, 1]\n")), Error);
    EXPECT_THROW(experiment_from(parse_config("[workload]\ngenerator = \"trace\"\n")), Error);
}

TEST(ExperimentConfig, GridExpandsInDeclaredOrder) {
    const auto c = experiment_from(parse_config(recall_grid));
    const auto cells = grid_cells(c);
    ASSERT_EQ(cells.size(), 1u + 9u + 1u + 1u);
    EXPECT_EQ(cells[0].key(), "full");
    EXPECT_EQ(cells[1].key(), "hierarchy/cumulative/beta=0.3/r=0");
    EXPECT_EQ(cells[3].key(), "hierarchy/cumulative/beta=0.7/r=0");
    EXPECT_EQ(cells[9].key(), "hierarchy/cumulative/beta=0.7/r=0.1");
    EXPECT_EQ(cells[10].key(), "streaming/budget=0.5");
}

TEST(ExperimentConfig, WindowAndIntervalAxes) {
    const auto c = experiment_from(parse_config(
        "[workload]\nlayers = 1\nheads = 1\nchain_len = 300\n[grid]\nwindow_size = [16, 64]\nmanage_interval = [32, 128]\n"));
    const auto cells = grid_cells(c);
    ASSERT_EQ(cells.size(), 4u);
    EXPECT_EQ(cells[1].key(), "hierarchy/cumulative/beta=0.5/r=0.05/window=16/interval=128");
    const auto g = run_grid(c);
    EXPECT_EQ(g.runs[0].result.manage_events, 299u / 32);
    EXPECT_EQ(g.runs[1].result.manage_events, 299u / 128);
    EXPECT_GT(g.runs[0].result.evicted_total, g.runs[2].result.evicted_total);  // a smaller window frees more candidates
    EXPECT_THROW(experiment_from(parse_config("[grid]\nmanage_interval = [0]\n")), Error);
}

TEST(RunGrid, RowsAreDeterministicAndIndependentOfThreads) {
    const auto c = experiment_from(parse_config(recall_grid));
    const auto a = run_grid(c, 1);
    const auto b = run_grid(c, 1);
    const auto p = run_grid(c, 4);
    EXPECT_EQ(a.rows.str(), b.rows.str());
    EXPECT_EQ(a.rows.str(), p.rows.str());
    EXPECT_EQ(a.summary.str(), p.summary.str());
    for (const auto& s : column(a.rows, "status")) EXPECT_EQ(s, "ok");
}

TEST(RunGrid, HbmRatioDoesNotMoveRecallAndNoEvictionRecallsEverything) {
    const auto c = experiment_from(parse_config(recall_grid));
    const auto g = run_grid(c);
    const auto keys = column(g.summary, "cell");
    const auto recall = column(g.summary, "recall");
    const auto evicted = column(g.summary, "mean_evicted_fraction");
    for (std::size_t row = 1; row <= 9; row += 3) {
        EXPECT_EQ(recall[row], recall[row + 1]) << keys[row];
        EXPECT_EQ(recall[row], recall[row + 2]) << keys[row];
        EXPECT_EQ(evicted[row], evicted[row + 2]) << keys[row];
    }
    EXPECT_EQ(recall[0], "1");  // full cache
    for (std::size_t row = 1; row <= 3; ++row) {
        EXPECT_EQ(recall[row], "1") << keys[row];
        EXPECT_EQ(evicted[row], "0") << keys[row];
    }
    EXPECT_EQ(recall[10], "0");  // streaming at half budget
}

TEST(RunGrid, SummaryMatchesItsRows) {
    auto c = experiment_from(parse_config(recall_grid));
    c.seeds = {7, 8};
    const auto g = run_grid(c);
    ASSERT_EQ(g.runs.size(), 2 * grid_cells(c).size());
    const auto& h2o_a = g.runs[g.runs.size() - 2].result;
    const auto& h2o_b = g.runs[g.runs.size() - 1].result;
    const std::size_t k = h2o_a.recall_successes + h2o_b.recall_successes;
    const std::size_t n = h2o_a.recall_trials + h2o_b.recall_trials;
    const auto iv = clopper_pearson(static_cast<std::int64_t>(k), static_cast<std::int64_t>(n));
    EXPECT_EQ(column(g.summary, "recall_trials").back(), std::to_string(n));
    EXPECT_EQ(column(g.summary, "recall_ci_low_pct").back(), format_number(round_half_away(100 * iv.lower)));
    EXPECT_EQ(column(g.summary, "recall_ci_high_pct").back(), format_number(round_half_away(100 * iv.upper)));
}

TEST(RunGrid, BadWorkloadIsReportedPerRun) {
    auto c = experiment_from(parse_config(recall_grid));
    c.workload.shape.chain_len = 60;  // too short for six needles outside the window
    const auto g = run_grid(c);
    for (const auto& s : column(g.rows, "status")) EXPECT_NE(s.find("error: infeasible geometry"), std::string::npos) << s;
    for (const auto& w : column(g.summary, "warning")) EXPECT_NE(w.find("no successful runs; skipped"), std::string::npos) << w;
}

TEST(Census, CountsCoverEveryPosition) {
    auto c = experiment_from(parse_config(recall_grid));
    c.workload.generator = "longtail";
    c.grid.evict_ratios = {0.1};
    const auto t = census(c);
    ASSERT_EQ(t.size(), 512u);
    std::istringstream in(t.str());
    std::string line;
    std::getline(in, line);
    std::size_t step = 0;
    while (std::getline(in, line)) {
        std::istringstream cells(line);
        std::string cell;
        std::size_t vals[5];
        for (auto& v : vals) {
            std::getline(cells, cell, ',');
            v = std::stoul(cell);
        }
        EXPECT_EQ(vals[1] + vals[2] + vals[3] + vals[4], 32 + step + 1);
        ++step;
    }
}

TEST(GradientStudy, DeterministicAndBounded) {
    auto c = experiment_from(parse_config("[gradient]\ninstances = 5\npositions = 12\n"));
    const auto a = gradient_study(c);
    const auto b = gradient_study(c);
    EXPECT_EQ(a.rows.str(), b.rows.str());
    EXPECT_EQ(a.rows.size(), 5u);
    EXPECT_GE(a.mean_rho, -1.0);
    EXPECT_LE(a.mean_rho, 1.0);
}

TEST(Cli, ExitCodes) {
    const auto dir = scratch("cli");
    const fs::path cfg = dir / "small.toml";
    write(cfg, "[experiment]\nname = \"small\"\n[workload]\nlayers = 2\nheads = 2\nchain_len = 200\n"
               "[hierarchy]\nwindow_size = 32\nevict_ratio = 0.1\n");
    const std::string common = "-c " + cfg.string() + " -o " + (dir / "out").string();
    EXPECT_EQ(run_cli("validate-props " + common), 0);
    EXPECT_EQ(run_cli("validate-props " + common + " --inject-fault bound-renormalized"), 2);
    EXPECT_EQ(run_cli("validate-props " + common + " --inject-fault nonsense"), 1);
    EXPECT_EQ(run_cli("run-grid " + common), 0);
    EXPECT_TRUE(fs::exists(dir / "out" / "small_grid.csv"));
    EXPECT_TRUE(fs::exists(dir / "out" / "small_summary.csv"));
    EXPECT_EQ(run_cli("gen-trace " + common + " --format text"), 0);
    EXPECT_TRUE(fs::exists(dir / "out" / "small_trace.txt"));
    EXPECT_EQ(run_cli("report-costs " + common), 1);  // no [calibration] table

    write(dir / "bad.toml", "[grid]\nbeta = [1.5]\n");
    EXPECT_EQ(run_cli("run-grid -c " + (dir / "bad.toml").string()), 1);
    EXPECT_EQ(run_cli("run-grid -c " + (dir / "missing.toml").string()), 1);
    EXPECT_EQ(run_cli("no-such-command"), 1);
    EXPECT_EQ(run_cli("--help"), 0);
    fs::remove_all(dir);
}

TEST(Cli, RerunsProduceIdenticalFiles) {
    const auto dir = scratch("rerun");
    const fs::path cfg = dir / "r.toml";
    write(cfg, recall_grid);
    auto read = [](const fs::path& p) {
        std::ifstream in(p);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    ASSERT_EQ(run_cli("run-grid -c " + cfg.string() + " -o " + (dir / "a").string()), 0);
    ASSERT_EQ(run_cli("run-grid -j 3 -c " + cfg.string() + " -o " + (dir / "b").string()), 0);
    EXPECT_EQ(read(dir / "a" / "recall_grid_grid.csv"), read(dir / "b" / "recall_grid_grid.csv"));
    EXPECT_FALSE(read(dir / "a" / "recall_grid_grid.csv").empty());
    fs::remove_all(dir);
}
