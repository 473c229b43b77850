// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "kvtier/types.hpp"

namespace kvtier {

struct Interval {
    double lower = 0.0;
    double upper = 1.0;
};

namespace detail {

/// x in [0,1] with I_x(a,b) = p, by bisection (I_x is increasing in x).
inline double beta_quantile(double a, double b, double p, double tol = 1e-9) {
    double lo = 0.0;
    double hi = 1.0;
    while (hi - lo > tol) {
        const double mid = 0.5 * (lo + hi);
        (boost::math::ibeta(a, b, mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

/**
 * Exact binomial interval. The lower end is the alpha/2 quantile of
 * Beta(k, n-k+1), the upper end the 1-alpha/2 quantile of Beta(k+1, n-k).
 */
inline Interval clopper_pearson(std::int64_t k, std::int64_t n, double confidence = 0.95) {
    require(n > 0 && k >= 0 && k <= n, "clopper_pearson: need 0 <= k <= n and n > 0");
    require(confidence > 0.0 && confidence < 1.0, "clopper_pearson: confidence must be in (0,1)");
    const double alpha = 1.0 - confidence;
    const double kd = static_cast<double>(k);
    const double nd = static_cast<double>(n);
    Interval ci;
    ci.lower = k == 0 ? 0.0 : detail::beta_quantile(kd, nd - kd + 1.0, alpha / 2.0);
    ci.upper = k == n ? 1.0 : detail::beta_quantile(kd + 1.0, nd - kd, 1.0 - alpha / 2.0);
    return ci;
}

namespace detail {

inline double log_choose(std::int64_t n, std::int64_t k) {
    return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
           std::lgamma(static_cast<double>(n - k) + 1.0);
}

}  // namespace detail

/**
 * Two-sided Fisher exact test on [[a, b], [c, d]]: the total probability of
 * all tables with the observed margins that are no more likely than the
 * observed one.
 */
inline double fisher_exact(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
    require(a >= 0 && b >= 0 && c >= 0 && d >= 0, "fisher_exact: counts must be nonnegative");
    const std::int64_t row1 = a + b;
    const std::int64_t row2 = c + d;
    const std::int64_t col1 = a + c;
    const std::int64_t n = row1 + row2;
    require(row1 > 0 && row2 > 0 && col1 > 0 && n - col1 > 0, "fisher_exact: degenerate margins");

    const double log_denom = detail::log_choose(n, col1);
    auto log_p = [&](std::int64_t x) {
        return detail::log_choose(row1, x) + detail::log_choose(row2, col1 - x) - log_denom;
    };
    const double observed = log_p(a);
    // Relative slack so tables tied with the observed one are not lost to rounding.
    const double cutoff = observed + std::log1p(1e-7);
    const std::int64_t lo = std::max<std::int64_t>(0, col1 - row2);
    const std::int64_t hi = std::min(row1, col1);
    // Dividing by the summed mass of all tables cancels the lgamma rounding in
    // the denominator and makes a tail that covers every table exactly 1.
    double p = 0.0;
    double total = 0.0;
    for (std::int64_t x = lo; x <= hi; ++x) {
        const double lp = log_p(x);
        const double px = std::exp(lp);
        total += px;
        if (lp <= cutoff) {
            p += px;
        }
    }
    return std::min(1.0, p / total);
}

/// Nearest integer, halves away from zero.
inline double round_half_away(double x) { return x < 0.0 ? -std::floor(-x + 0.5) : std::floor(x + 0.5); }

/// One binary observation belonging to a configuration group.
struct Outcome {
    std::string group;
    bool success = false;
};

struct SummaryRow {
    std::string group;
    std::size_t n = 0;
    std::size_t successes = 0;
    double estimate = 0.0;
    Interval ci;
    std::string warning;  // nonempty when the group could not be summarized
};

/**
 * Per-group success rate with an exact interval, groups in lexicographic
 * order. Groups listed in `expected` that received no outcomes produce a
 * warning row instead of an estimate.
 */
inline std::vector<SummaryRow> summarize(const std::vector<Outcome>& outcomes,
                                         const std::vector<std::string>& expected = {},
                                         double confidence = 0.95) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
    for (const auto& g : expected) {
        counts.try_emplace(g, 0, 0);
    }
    for (const auto& o : outcomes) {
        auto& [n, k] = counts[o.group];
        ++n;
        k += o.success ? 1 : 0;
    }
    std::vector<SummaryRow> rows;
    for (const auto& [group, nk] : counts) {
        SummaryRow r;
        r.group = group;
        r.n = nk.first;
        r.successes = nk.second;
        if (r.n == 0) {
            r.warning = "empty group skipped";
            r.ci = {0.0, 0.0};
        } else {
            r.estimate = static_cast<double>(r.successes) / static_cast<double>(r.n);
            r.ci = clopper_pearson(static_cast<std::int64_t>(r.successes), static_cast<std::int64_t>(r.n), confidence);
        }
        rows.push_back(r);
    }
    return rows;
}

}  // namespace kvtier
