// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kvtier/rng.hpp"
#include "kvtier/scoring.hpp"
#include "kvtier/types.hpp"

namespace kvtier {

// Pure-eviction baselines. Each takes the ascending list of live positions and
// returns the ascending subset to keep, of size min(budget, |live|). The
// overloads taking `t` treat positions 0..t-1 as live.

enum class BaselineKind { streaming, h2o, random };

inline const char* baseline_name(BaselineKind k) {
    switch (k) {
        case BaselineKind::streaming: return "streaming";
        case BaselineKind::h2o: return "h2o";
        case BaselineKind::random: return "random";
    }
    return "?";
}

struct BudgetPolicy {
    BaselineKind kind = BaselineKind::streaming;
    std::size_t budget_tokens = 0;  // used when budget_ratio == 0
    double budget_ratio = 0.0;      // fraction of the current sequence length
    std::uint64_t rng_seed = 0;
    std::size_t sink_size = 4;
    std::size_t window_size = 128;

    /// Token budget for a sequence of `n` positions, raised to the policy's minimum.
    std::size_t budget_for(std::size_t n) const {
        std::size_t b = budget_ratio > 0.0
                            ? static_cast<std::size_t>(std::ceil(budget_ratio * static_cast<double>(n) - 1e-9))
                            : budget_tokens;
        switch (kind) {
            case BaselineKind::streaming: b = std::max(b, sink_size + 1); break;
            case BaselineKind::h2o: b = std::max(b, window_size); break;
            case BaselineKind::random: b = std::max<std::size_t>(b, 1); break;
        }
        return b;
    }
};

namespace detail {

inline std::vector<Position> iota_positions(std::size_t t) {
    std::vector<Position> all(t);
    std::iota(all.begin(), all.end(), Position{0});
    return all;
}

}  // namespace detail

/// First sink_size live positions plus the most recent budget - sink_size.
inline std::vector<Position> streaming_keep(std::span<const Position> live, std::size_t budget, std::size_t sink_size) {
    require(budget >= sink_size + 1, "streaming: budget must be >= sink_size + 1");
    if (live.size() <= budget) {
        return {live.begin(), live.end()};
    }
    std::vector<Position> keep(live.begin(), live.begin() + static_cast<std::ptrdiff_t>(sink_size));
    keep.insert(keep.end(), live.end() - static_cast<std::ptrdiff_t>(budget - sink_size), live.end());
    return keep;
}

inline std::vector<Position> streaming_evict(std::size_t t, std::size_t budget, std::size_t sink_size) {
    return streaming_keep(detail::iota_positions(t), budget, sink_size);
}

/// Recent window plus the highest cumulative scores; equal scores favour newer positions.
inline std::vector<Position> h2o_keep(const ScoreVector& scores,
                                      std::span<const Position> live,
                                      std::size_t budget,
                                      std::size_t window_size) {
    require(budget >= window_size, "h2o: budget must be >= window size");
    if (live.size() <= budget) {
        return {live.begin(), live.end()};
    }
    const std::size_t split = live.size() - window_size;
    std::vector<Position> keep(live.begin() + static_cast<std::ptrdiff_t>(split), live.end());
    const auto order = ascending_order(scores.s, live.first(split));
    const std::size_t heavy = budget - window_size;
    keep.insert(keep.end(), order.end() - static_cast<std::ptrdiff_t>(heavy), order.end());
    std::sort(keep.begin(), keep.end());
    return keep;
}

inline std::vector<Position> h2o_evict(const ScoreVector& scores, std::size_t t, std::size_t budget, std::size_t window_size) {
    return h2o_keep(scores, detail::iota_positions(t), budget, window_size);
}

/**
 * Uniformly random subset of size budget. Sinks (first sink_size) and then the
 * most recent window_size positions are kept first, as far as the budget allows.
 */
inline std::vector<Position> random_keep(std::span<const Position> live,
                                         std::size_t budget,
                                         std::uint64_t seed,
                                         std::size_t sink_size = 0,
                                         std::size_t window_size = 0) {
    require(budget >= 1, "random: budget must be >= 1");
    if (live.size() <= budget) {
        return {live.begin(), live.end()};
    }
    const std::size_t n = live.size();
    std::vector<char> kept(n, 0);
    std::size_t taken = 0;
    for (std::size_t i = 0; i < std::min(sink_size, n) && taken < budget; ++i) {
        kept[i] = 1;
        ++taken;
    }
    for (std::size_t k = 0; k < std::min(window_size, n) && taken < budget; ++k) {
        const std::size_t i = n - 1 - k;
        if (!kept[i]) {
            kept[i] = 1;
            ++taken;
        }
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i) {
        if (!kept[i]) {
            rest.push_back(i);
        }
    }
    Rng rng(seed);
    for (std::size_t k = 0; taken < budget; ++k, ++taken) {
        const std::size_t j = k + static_cast<std::size_t>(rng.index(rest.size() - k));
        std::swap(rest[k], rest[j]);
        kept[rest[k]] = 1;
    }
    std::vector<Position> keep;
    keep.reserve(budget);
    for (std::size_t i = 0; i < n; ++i) {
        if (kept[i]) {
            keep.push_back(live[i]);
        }
    }
    return keep;
}

inline std::vector<Position> random_evict(std::size_t t,
                                          std::size_t budget,
                                          std::uint64_t seed,
                                          std::size_t sink_size = 0,
                                          std::size_t window_size = 0) {
    return random_keep(detail::iota_positions(t), budget, seed, sink_size, window_size);
}

}  // namespace kvtier
