// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "kvtier/attention.hpp"
#include "kvtier/rng.hpp"
#include "kvtier/workload.hpp"

using namespace kvtier;

namespace {

TraceShape small_shape(std::size_t chain) { return TraceShape{2, 2, 4, 16, chain}; }

double prefix_share(std::vector<double> s, double q) {
    std::sort(s.begin(), s.end());
    std::reverse(s.begin(), s.end());
    const std::size_t k = static_cast<std::size_t>(std::ceil(q * s.size() - 1e-9));
    double top = 0.0, total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        total += s[i];
        if (i < k) top += s[i];
    }
    return top / total;
}

}  // namespace

TEST(Concentration, UniformScoresGiveTheQuantile) {
    EXPECT_NEAR(measure_concentration(std::vector<double>(100, 3.0), 0.2), 0.2, 1e-12);
    EXPECT_NEAR(measure_concentration(std::vector<double>(7, 1.0), 0.2), 2.0 / 7.0, 1e-12);
}

TEST(Concentration, OneHotGivesOne) {
    std::vector<double> s(50, 0.0);
    s[17] = 2.5;
    EXPECT_EQ(measure_concentration(s, 0.02), 1.0);
    EXPECT_EQ(measure_concentration(s, 0.5), 1.0);
}

TEST(Concentration, MatchesSortAndPrefixSum) {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s(1 + rng.index(300));
        for (double& x : s) x = std::exp(2.0 * rng.normal());
        const double q = 0.05 + 0.9 * rng.uniform();
        EXPECT_NEAR(measure_concentration(s, q), prefix_share(s, q), 1e-12);
    }
}

TEST(Concentration, ZeroMassFails) {
    EXPECT_THROW(measure_concentration(std::vector<double>(4, 0.0), 0.2), Error);
    EXPECT_THROW(measure_concentration(std::vector<double>{}, 0.2), Error);
}

TEST(LongTail, DefaultTargetAtLengthThousand) {
    const auto lt = gen_longtail_trace(TraceShape{4, 4, 8, 32, 1000}, 0.565, 7);
    EXPECT_GE(lt.realized_share, 0.555);
    EXPECT_LE(lt.realized_share, 0.575);
    EXPECT_NEAR(measure_concentration(cumulative_scores(lt.workload.trace).s, 0.2), lt.realized_share, 1e-15);
    lt.workload.trace.validate();
}

TEST(LongTail, CalibrationHoldsForSeveralTargetsAndSeeds) {
    for (double target : {0.55, 0.565, 0.7})
        for (std::uint64_t seed : {1u, 2u}) {
            const auto lt = gen_longtail_trace(small_shape(500), target, seed);
            EXPECT_NEAR(lt.realized_share, target, 0.01);
        }
}

TEST(LongTail, ShareIsMonotoneInTheExponent) {
    const LongTailProfile profile(small_shape(500), 3, {});
    double prev = profile.share(0.0);
    for (double e = 0.05; e <= 3.0; e += 0.05) {
        const double s = profile.share(e);
        EXPECT_GE(s, prev - 1e-12) << "exponent " << e;
        prev = s;
    }
    EXPECT_GT(prev, 0.9);
}

TEST(LongTail, ClosedFormShareMatchesMaterializedTrace) {
    const LongTailProfile profile(small_shape(300), 4, {});
    for (double e : {0.0, 0.3, 1.1}) {
        const auto trace = profile.materialize(e);
        EXPECT_NEAR(profile.share(e), measure_concentration(cumulative_scores(trace).s, 0.2), 1e-9);
    }
}

TEST(LongTail, UniformTargetIsUnreachable) {
    try {
        gen_longtail_trace(small_shape(500), 0.21, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("unreachable"), std::string::npos);
    }
    EXPECT_THROW(gen_longtail_trace(small_shape(500), 0.2, 1), Error);
}

TEST(LongTail, SameSeedIsBitwiseIdentical) {
    const auto a = gen_longtail_trace(small_shape(200), 0.565, 11);
    const auto b = gen_longtail_trace(small_shape(200), 0.565, 11);
    const auto c = gen_longtail_trace(small_shape(200), 0.565, 12);
    EXPECT_TRUE(a.workload.bitwise_equal(b.workload));
    EXPECT_FALSE(a.workload.bitwise_equal(c.workload));
}

TEST(LongTail, NanLayersAreWholeAndIgnoredByScores) {
    LongTailOptions opt;
    opt.nan_layers = {1};
    opt.nan_from_step = 50;
    const auto lt = gen_longtail_trace(small_shape(200), 0.565, 5, opt);
    const auto& tr = lt.workload.trace;
    tr.validate();
    EXPECT_FALSE(tr.is_nan_layer(49, 1));
    EXPECT_TRUE(tr.is_nan_layer(50, 1));
    EXPECT_FALSE(tr.is_nan_layer(50, 0));
    const auto s = cumulative_scores(tr);
    EXPECT_NEAR(std::accumulate(s.s.begin(), s.s.end(), 0.0), 200.0, 1e-9);
}

TEST(LongTail, AllLayersNanIsRejected) {
    LongTailOptions opt;
    opt.nan_layers = {0, 1};
    EXPECT_THROW(LongTailProfile(small_shape(10), 1, opt), Error);
}

TEST(Trace, RowsAreSimplexesOverVisiblePositions) {
    const auto lt = gen_longtail_trace(small_shape(64), 0.565, 1);
    const auto& tr = lt.workload.trace;
    for (std::size_t t = 0; t < tr.steps(); ++t) EXPECT_EQ(tr.row(t, 1, 1).size(), 16 + t + 1);
    AttentionTrace bad = tr;
    bad.row(3, 0, 0)[0] += 0.1;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(Recall, NeedlesLieOutsideTheWindowAtQueryTime) {
    const TraceShape shape{4, 4, 8, 32, 512};
    const auto rw = gen_recall_task(shape, 8, 7);
    EXPECT_EQ(rw.task.needles.size(), 8u);
    EXPECT_EQ(rw.task.schedule.size(), 44u);
    for (const auto& q : rw.task.schedule) {
        const Position needle = rw.task.needles[q.needle];
        EXPECT_LT(needle + 128, shape.positions_at(q.step));
    }
}

TEST(Recall, RetrievalQueriesConcentrateOnTheirNeedle) {
    const auto rw = gen_recall_task(TraceShape{2, 2, 8, 32, 512}, 6, 3);
    for (const auto& q : rw.task.schedule)
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t h = 0; h < 2; ++h)
                EXPECT_GE(rw.workload.trace.row(q.step, l, h)[rw.task.needles[q.needle]], 0.9);
}

TEST(Recall, TraceWeightsAreTheSoftmaxOfStoredKeys) {
    // A retrieval query is a multiple of its needle key, so its trace row must equal
    // the softmax over stored keys of that key direction at the needle's logit.
    const auto rw = gen_recall_task(TraceShape{1, 1, 8, 32, 300}, 2, 9);
    const auto& q = rw.task.schedule.front();
    const Position needle = rw.task.needles[q.needle];
    const auto k = rw.workload.keys.at(0, 0, needle);
    const double scale = 12.0 * std::sqrt(8.0) / dot(k, k);  // q = scale * k gives q.k/sqrt(d) = 12
    Vector query(k.begin(), k.end());
    for (double& x : query) x *= scale;
    std::vector<Vector> keys;
    for (Position p = 0; p < rw.workload.trace.shape().positions_at(q.step); ++p) {
        const auto kp = rw.workload.keys.at(0, 0, p);
        keys.emplace_back(kp.begin(), kp.end());
    }
    const auto w = attention_weights(query, keys);
    const auto row = rw.workload.trace.row(q.step, 0, 0);
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(row[i], w[i], 1e-12);
}

TEST(Recall, InfeasibleGeometryFails) {
    EXPECT_THROW(gen_recall_task(TraceShape{1, 1, 8, 32, 100}, 8, 1), Error);
}

TEST(Recall, SameSeedIsBitwiseIdentical) {
    const auto a = gen_recall_task(TraceShape{2, 2, 8, 16, 300}, 4, 5);
    const auto b = gen_recall_task(TraceShape{2, 2, 8, 16, 300}, 4, 5);
    EXPECT_TRUE(a.workload.bitwise_equal(b.workload));
}
