// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "kvtier/attention.hpp"
#include "kvtier/rng.hpp"
#include "kvtier/scoring.hpp"

using namespace kvtier;

namespace {

Vector random_vector(Rng& rng, std::size_t d) {
    Vector v(d);
    for (double& x : v) x = rng.normal();
    return v;
}

std::vector<double> random_simplex(Rng& rng, std::size_t n) {
    std::vector<double> w(n);
    double z = 0.0;
    for (double& x : w) z += (x = rng.uniform() + 1e-3);
    for (double& x : w) x /= z;
    return w;
}

StepAttention random_step(Rng& rng, std::size_t layers, std::size_t heads, std::size_t n) {
    StepAttention a(layers, heads, n);
    for (std::size_t l = 0; l < layers; ++l)
        for (std::size_t h = 0; h < heads; ++h) {
            const auto w = random_simplex(rng, n);
            std::copy(w.begin(), w.end(), a.row(l, h).begin());
        }
    return a;
}

// Ranks by counting: 1 + (#smaller) + (#equal - 1) / 2.
std::vector<double> counting_ranks(const std::vector<double>& x) {
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double less = 0, equal = 0;
        for (double y : x) {
            less += y < x[i];
            equal += y == x[i];
        }
        r[i] = 1.0 + less + (equal - 1.0) / 2.0;
    }
    return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += (a[i] - ma) * (b[i] - mb);
        aa += (a[i] - ma) * (a[i] - ma);
        bb += (b[i] - mb) * (b[i] - mb);
    }
    return ab / std::sqrt(aa * bb);
}

double cosine(const Vector& a, const Vector& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        ab += a[j] * b[j];
        aa += a[j] * a[j];
        bb += b[j] * b[j];
    }
    return ab / std::sqrt(aa * bb);
}

std::vector<Position> argsort(const std::vector<double>& s) { return ascending_order(s); }

}  // namespace

TEST(Cumulative, SingleLayerHeadAddsTheWeights) {
    StepAttention a(1, 1, 2);
    a.row(0, 0)[0] = 0.2;
    a.row(0, 0)[1] = 0.8;
    const auto s = update_cumulative(ScoreVector{{0.0, 0.0}}, a);
    EXPECT_DOUBLE_EQ(s[0], 0.2);
    EXPECT_DOUBLE_EQ(s[1], 0.8);
}

TEST(Cumulative, NanLayerIsIgnored) {
    Rng rng(1);
    auto a = random_step(rng, 2, 3, 5);
    a.nan_layer[1] = 1;
    for (double& x : a.row(1, 0)) x = std::nan("");
    StepAttention only(1, 3, 5);
    for (std::size_t h = 0; h < 3; ++h) std::copy(a.row(0, h).begin(), a.row(0, h).end(), only.row(0, h).begin());
    EXPECT_EQ(update_cumulative({}, a).s, update_cumulative({}, only).s);
}

TEST(Cumulative, AllLayersNanIsAnError) {
    StepAttention a(2, 1, 3);
    a.nan_layer = {1, 1};
    try {
        update_cumulative({}, a);
        FAIL();
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "no valid layers");
    }
}

TEST(Cumulative, MatchesNestedLoopAverage) {
    Rng rng(2);
    const std::size_t L = 3, H = 2, n = 9;
    ScoreVector s;
    std::vector<double> ref(n, 0.0);
    for (int step = 0; step < 10; ++step) {
        const auto a = random_step(rng, L, H, n);
        s = update_cumulative(s, a);
        for (std::size_t i = 0; i < n; ++i) {
            double layers = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
                double heads = 0.0;
                for (std::size_t h = 0; h < H; ++h) heads += a.weights[(l * H + h) * n + i];
                layers += heads / H;
            }
            ref[i] += layers / L;
        }
    }
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(s[i], ref[i], 1e-14);
}

TEST(Cumulative, NewPositionsEnterAtZeroAndScoresNeverDecrease) {
    Rng rng(3);
    ScoreVector s;
    double prev_total = 0.0;
    for (std::size_t t = 1; t <= 200; ++t) {
        const auto before = s.s;
        s = update_cumulative(s, random_step(rng, 2, 2, t));
        for (std::size_t i = 0; i < before.size(); ++i) EXPECT_GE(s[i], before[i]);
        const double total = std::accumulate(s.s.begin(), s.s.end(), 0.0);
        EXPECT_NEAR(total, prev_total + 1.0, 1e-9);
        prev_total = total;
    }
    EXPECT_NEAR(prev_total, 200.0, 1e-6);
    EXPECT_EQ(s.last_updated_step, 199);
}

TEST(Cumulative, SingleStepArgsortMatchesOracle) {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto a = random_step(rng, 3, 4, 20);
        std::vector<double> ref(20, 0.0);
        for (std::size_t l = 0; l < 3; ++l)
            for (std::size_t h = 0; h < 4; ++h)
                for (std::size_t i = 0; i < 20; ++i) ref[i] += a.row(l, h)[i];
        EXPECT_EQ(argsort(update_cumulative({}, a).s), argsort(ref));
    }
}

TEST(Ordering, TiesBreakTowardOlderPositions) {
    const std::vector<double> s{0.5, 0.1, 0.5, 0.1, 0.0};
    EXPECT_EQ(ascending_order(s), (std::vector<Position>{4, 1, 3, 0, 2}));
    const std::vector<Position> cand{3, 0, 1};
    EXPECT_EQ(ascending_order(s, cand), (std::vector<Position>{1, 3, 0}));
}

TEST(Vatp, UnitNormsKeepTheRanking) {
    Rng rng(5);
    ScoreVector s{random_simplex(rng, 15)};
    EXPECT_EQ(argsort(score_vatp(s, std::vector<double>(15, 1.0)).s), argsort(s.s));
}

TEST(Vatp, ZeroNormZeroesTheScore) {
    const auto v = score_vatp(ScoreVector{{0.3, 0.7}}, std::vector<double>{0.0, 2.0});
    EXPECT_EQ(v[0], 0.0);
    EXPECT_DOUBLE_EQ(v[1], 1.4);
}

TEST(Vatp, MatchesElementwiseProduct) {
    Rng rng(6);
    ScoreVector s{random_simplex(rng, 10)};
    std::vector<double> norms(10);
    for (double& x : norms) x = 3.0 * rng.uniform();
    const auto v = score_vatp(s, norms);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(v[i], s[i] * norms[i]);
    EXPECT_THROW(score_vatp(s, std::vector<double>(9, 1.0)), Error);
}

TEST(Vatp, MeanValueNormAveragesLayersAndHeads) {
    KvTensor v(2, 2, 1, 2);
    const double xs[4] = {3.0, 0.0, 1.0, 5.0};
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t h = 0; h < 2; ++h) v.at(l, h, 0)[0] = xs[l * 2 + h];
    EXPECT_DOUBLE_EQ(mean_value_norms(v)[0], 9.0 / 4.0);
}

TEST(Redundancy, OrthogonalNeighboursLeaveBaseUntouched) {
    const std::vector<Vector> keys{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    const ScoreVector base{{0.1, 0.2, 0.3}};
    EXPECT_EQ(score_redundancy(keys, base).s, base.s);
}

TEST(Redundancy, DuplicatedNeighboursGetOne) {
    const std::vector<Vector> keys{{1, 0}, {2, 1}, {2, 1}, {0, 1}};
    const auto r = neighbor_redundancy(keys);
    EXPECT_NEAR(r[1], 1.0, 1e-15);
    EXPECT_NEAR(r[2], 1.0, 1e-15);
}

TEST(Redundancy, SinglePositionHasNone) {
    EXPECT_EQ(neighbor_redundancy(std::vector<Vector>{{1, 2}}), std::vector<double>{0.0});
}

TEST(Redundancy, MatchesPairwiseCosineOracle) {
    Rng rng(7);
    std::vector<Vector> keys;
    for (int i = 0; i < 8; ++i) keys.push_back(random_vector(rng, 5));
    ScoreVector base{random_simplex(rng, 8)};
    std::vector<double> norms(8);
    for (double& x : norms) x = rng.uniform();
    const auto red = score_redundancy(keys, base);
    const auto comb = score_combined(keys, base, norms);
    for (std::size_t i = 0; i < 8; ++i) {
        double r = -2.0;
        for (std::size_t j = 0; j < 8; ++j)
            if (j + 1 == i || j == i + 1) r = std::max(r, cosine(keys[i], keys[j]));
        EXPECT_NEAR(red[i], base[i] - r, 1e-14);
        EXPECT_NEAR(comb[i], base[i] * norms[i] - r, 1e-14);
    }
}

TEST(Rkv, LambdaOneRanksByPooledImportance) {
    Rng rng(8);
    std::vector<StepAttention> steps;
    for (int i = 0; i < 8; ++i) steps.push_back(random_step(rng, 1, 2, 12));
    std::vector<Vector> keys;
    for (int i = 0; i < 12; ++i) keys.push_back(random_vector(rng, 4));
    RkvParams p{1.0, 8, 1};
    const auto z = score_rkv(steps, keys, p);
    EXPECT_EQ(argsort(z.s), argsort(windowed_mean_attention(steps, 12)));
}

TEST(Rkv, LambdaZeroOrthogonalKeysAreAllEqual) {
    Rng rng(9);
    std::vector<StepAttention> steps{random_step(rng, 1, 1, 4)};
    const std::vector<Vector> keys{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
    const auto z = score_rkv(steps, keys, RkvParams{0.0, 8, 7});
    for (double x : z.s) EXPECT_EQ(x, z[0]);
}

TEST(Rkv, MatchesDefinitionOracle) {
    Rng rng(10);
    const std::size_t n = 12;
    std::vector<StepAttention> steps;
    // Ten observed steps over a growing prefix; only the last eight count.
    for (std::size_t s = 0; s < 10; ++s) steps.push_back(random_step(rng, 2, 2, n - 3 + std::min<std::size_t>(s, 3)));
    std::vector<Vector> keys;
    for (std::size_t i = 0; i < n; ++i) keys.push_back(random_vector(rng, 6));
    const RkvParams p{0.07, 8, 7};
    const auto z = score_rkv(steps, keys, p);

    std::vector<double> mean(n, 0.0);
    for (std::size_t s = 2; s < 10; ++s)
        for (std::size_t i = 0; i < steps[s].n_positions; ++i) {
            double acc = 0.0;
            for (std::size_t l = 0; l < 2; ++l)
                for (std::size_t h = 0; h < 2; ++h) acc += steps[s].row(l, h)[i];
            mean[i] += acc / 4.0 / 8.0;
        }
    for (std::size_t i = 0; i < n; ++i) {
        double importance = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (j + 3 >= i && j <= i + 3) importance = std::max(importance, mean[j]);
        double redundancy = -2.0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) redundancy = std::max(redundancy, cosine(keys[i], keys[j]));
        EXPECT_NEAR(z[i], 0.07 * importance - 0.93 * redundancy, 1e-14) << "position " << i;
    }
}

TEST(Rkv, FewerStepsThanWindowUsesAll) {
    Rng rng(11);
    std::vector<StepAttention> steps{random_step(rng, 1, 1, 5), random_step(rng, 1, 1, 5)};
    std::vector<Vector> keys;
    for (int i = 0; i < 5; ++i) keys.push_back(random_vector(rng, 3));
    const auto z = score_rkv(steps, keys, RkvParams{1.0, 8, 1});
    for (std::size_t i = 0; i < 5; ++i)
        EXPECT_NEAR(z[i], 0.5 * (steps[0].row(0, 0)[i] + steps[1].row(0, 0)[i]), 1e-15);
}

TEST(Rkv, CandidatesRestrictTheRedundancyPool) {
    const std::vector<Vector> keys{{1, 0}, {1, 0}, {0, 1}};
    StepAttention a(1, 1, 3);
    a.row(0, 0)[0] = 1.0;
    const std::vector<StepAttention> steps{a};
    const std::vector<Position> cand{1, 2};
    const auto z = score_rkv(steps, keys, RkvParams{0.0, 8, 1}, cand);
    EXPECT_NEAR(z[0], -1.0, 1e-15);  // twin at position 1 is a candidate
    EXPECT_NEAR(z[1], 0.0, 1e-15);   // its twin is not
}

TEST(Spearman, IdenticalAndReversed) {
    const std::vector<double> a{3, 1, 4, 1.5, 9, 2.6};
    std::vector<double> rev(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) rev[i] = -a[i];
    EXPECT_DOUBLE_EQ(spearman_rho(a, a), 1.0);
    EXPECT_DOUBLE_EQ(spearman_rho(a, rev), -1.0);
}

TEST(Spearman, TiedExampleMatchesRankThenPearson) {
    const std::vector<double> a{1, 2, 3, 4, 5}, b{5, 6, 7, 8, 7};
    EXPECT_EQ(counting_ranks(b), (std::vector<double>{1, 2, 3.5, 5, 3.5}));
    const double ref = pearson(counting_ranks(a), counting_ranks(b));
    EXPECT_NEAR(spearman_rho(a, b), ref, 1e-15);
    EXPECT_NEAR(ref, 0.82078268166812329, 1e-12);
}

TEST(Spearman, RandomTiedInputsMatchOracle) {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.index(30);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = static_cast<double>(rng.index(5));
            b[i] = static_cast<double>(rng.index(5));
        }
        if (std::all_of(a.begin(), a.end(), [&](double x) { return x == a[0]; }) ||
            std::all_of(b.begin(), b.end(), [&](double x) { return x == b[0]; }))
            continue;
        EXPECT_NEAR(spearman_rho(a, b), pearson(counting_ranks(a), counting_ranks(b)), 1e-12);
    }
}

TEST(Spearman, ConstantInputIsUndefined) {
    try {
        spearman_rho(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3});
        FAIL();
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "undefined correlation");
    }
}

namespace {

// dL/dv_i = a_i g and dL/dk_i = a_i ((v_i - o) . g) q / sqrt(d) for L = 0.5 ||o - y||^2, g = o - y.
struct AnalyticGradient {
    std::vector<Vector> dk, dv;
};

AnalyticGradient analytic(const ToyAttention& toy, const Vector& target) {
    const auto w = attention_weights(toy.query, toy.keys);
    const auto o = attention_output(toy.query, toy.keys, toy.values);
    const std::size_t d = toy.query.size();
    Vector g(d);
    for (std::size_t j = 0; j < d; ++j) g[j] = o[j] - target[j];
    AnalyticGradient out;
    for (std::size_t i = 0; i < toy.keys.size(); ++i) {
        double proj = 0.0;
        for (std::size_t j = 0; j < d; ++j) proj += (toy.values[i][j] - o[j]) * g[j];
        Vector dk(d), dv(d);
        for (std::size_t j = 0; j < d; ++j) {
            dv[j] = w[i] * g[j];
            dk[j] = w[i] * proj * toy.query[j] / std::sqrt(static_cast<double>(d));
        }
        out.dk.push_back(dk);
        out.dv.push_back(dv);
    }
    return out;
}

double norm(const Vector& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST(GradientScore, FiniteDifferencesMatchAnalyticGradient) {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        ToyAttention toy;
        toy.query = random_vector(rng, 4);
        for (int i = 0; i < 6; ++i) {
            toy.keys.push_back(random_vector(rng, 4));
            toy.values.push_back(random_vector(rng, 4));
        }
        const Vector target = random_vector(rng, 4);
        const auto fd = score_gradient_fd(toy, QuadraticLoss{target});
        const auto an = analytic(toy, target);
        for (std::size_t i = 0; i < 6; ++i) {
            const double ref = norm(an.dk[i]) + norm(an.dv[i]);
            EXPECT_NEAR(fd[i], ref, 1e-4 * std::max(ref, 1e-3)) << "position " << i;
        }
    }
}

TEST(GradientScore, ValueGradientScalesWithWeight) {
    Rng rng(14);
    ToyAttention toy;
    toy.query = random_vector(rng, 3);
    for (int i = 0; i < 5; ++i) {
        toy.keys.push_back(random_vector(rng, 3));
        toy.values.push_back(random_vector(rng, 3));
    }
    const Vector target{0.0, 0.0, 0.0};
    const auto an = analytic(toy, target);
    const auto w = attention_weights(toy.query, toy.keys);
    const auto o = attention_output(toy.query, toy.keys, toy.values);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(norm(an.dv[i]), w[i] * norm(o), 1e-12);
}

TEST(GradientScore, NegligibleWeightGivesNegligibleScore) {
    ToyAttention toy;
    toy.query = {40.0, 0.0};
    toy.keys = {{1.0, 0.0}, {-1.0, 0.0}};
    toy.values = {{1.0, 2.0}, {-3.0, 0.5}};
    const auto s = score_gradient_fd(toy, QuadraticLoss{{0.0, 0.0}});
    EXPECT_LT(s[1], 1e-9);
    EXPECT_GT(s[0], 1.0);
}

TEST(GradientScore, RejectsOversizedToysAndNonFiniteLoss) {
    ToyAttention toy;
    toy.query = Vector(9, 0.0);
    toy.keys = {Vector(9, 0.0)};
    toy.values = {Vector(9, 0.0)};
    EXPECT_THROW(score_gradient_fd(toy, QuadraticLoss{Vector(9, 0.0)}), Error);
    toy.query = {1.0};
    toy.keys = {{1.0}};
    toy.values = {{1.0}};
    EXPECT_THROW(score_gradient_fd(toy, [](const Vector&) { return std::nan(""); }), Error);
}
