// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kvtier/scoring.hpp"
#include "kvtier/types.hpp"

namespace kvtier {

enum class Tier : std::uint8_t {
    hbm = 0,         // T0
    ddr = 1,         // T1
    compressed = 2,  // T2
    evicted = 3,     // T3
};

inline const char* tier_name(Tier t) {
    static constexpr std::array<const char*, 4> names{"T0", "T1", "T2", "T3"};
    return names[static_cast<std::size_t>(t)];
}

struct HierarchyConfig {
    double beta = 0.5;                 // share of surviving candidates kept in HBM
    double evict_ratio = 0.05;         // share of candidates evicted per manage event
    std::size_t manage_interval = 64;
    std::size_t sink_size = 4;
    std::size_t window_size = 128;
    std::size_t prompt_len = 0;
    bool t2_enabled = false;
    double t2_fraction = 0.5;          // bottom share of the host-resident set stored as int8
    std::size_t t_max = 2048;

    void validate() const {
        require(beta > 0.0 && beta <= 1.0, "beta must be in (0,1]");
        require(evict_ratio >= 0.0 && evict_ratio < 1.0, "evict_ratio must be in [0,1)");
        require(manage_interval > 0, "manage_interval must be positive");
        require(t2_fraction >= 0.0 && t2_fraction <= 1.0, "t2_fraction must be in [0,1]");
        require(t_max > 0, "t_max must be positive");
    }
};

/// floor(ratio * n), tolerant of binary representation error in decimal ratios.
inline std::size_t floor_fraction(double ratio, std::size_t n) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

/// Placement of every position ever created, plus host-side bookkeeping.
struct TierState {
    std::vector<Tier> tier_of;
    std::set<Position> cpu_store;  // T1 and T2 members
    std::set<Position> staging;    // host entries already resident in the GPU staging buffer
    std::int64_t step = 0;

    std::size_t size() const { return tier_of.size(); }

    Position append_position() {
        tier_of.push_back(Tier::hbm);
        return tier_of.size() - 1;
    }

    /// Positions that participate in attention: everything not evicted, ascending.
    std::vector<Position> visible() const {
        std::vector<Position> out;
        out.reserve(tier_of.size());
        for (Position p = 0; p < tier_of.size(); ++p) {
            if (tier_of[p] != Tier::evicted) {
                out.push_back(p);
            }
        }
        return out;
    }

    std::vector<Position> members(Tier t) const {
        std::vector<Position> out;
        for (Position p = 0; p < tier_of.size(); ++p) {
            if (tier_of[p] == t) {
                out.push_back(p);
            }
        }
        return out;
    }
};

struct TierCensus {
    std::int64_t step = 0;
    std::array<std::size_t, 4> counts{};
    std::uint64_t visible_bytes = 0;
    std::uint64_t cpu_bytes = 0;

    std::size_t total() const { return counts[0] + counts[1] + counts[2] + counts[3]; }
};

/// `bytes_per_token` for full-precision entries, `compressed_bytes_per_token` for T2.
inline TierCensus take_census(const TierState& state,
                              std::uint64_t bytes_per_token,
                              std::uint64_t compressed_bytes_per_token) {
    TierCensus c;
    c.step = state.step;
    for (Tier t : state.tier_of) {
        ++c.counts[static_cast<std::size_t>(t)];
    }
    const std::uint64_t t0 = c.counts[0], t1 = c.counts[1], t2 = c.counts[2];
    c.visible_bytes = (t0 + t1) * bytes_per_token + t2 * compressed_bytes_per_token;
    c.cpu_bytes = t1 * bytes_per_token + t2 * compressed_bytes_per_token;
    return c;
}

/**
 * Prompt positions, the first sink_size generated positions and the last
 * window_size positions, for a cache holding prompt_len + generated tokens.
 */
inline std::vector<Position> protected_set(std::size_t generated, const HierarchyConfig& cfg) {
    const std::size_t total = cfg.prompt_len + generated;
    std::vector<char> mark(total, 0);
    for (Position p = 0; p < std::min(cfg.prompt_len, total); ++p) {
        mark[p] = 1;
    }
    for (Position p = cfg.prompt_len; p < std::min(cfg.prompt_len + cfg.sink_size, total); ++p) {
        mark[p] = 1;
    }
    for (Position p = total - std::min(cfg.window_size, total); p < total; ++p) {
        mark[p] = 1;
    }
    std::vector<Position> out;
    for (Position p = 0; p < total; ++p) {
        if (mark[p]) {
            out.push_back(p);
        }
    }
    return out;
}

/**
 * One management event: evict the lowest-scoring share of unprotected live
 * positions, keep the top beta share of the rest in HBM, move the remainder
 * to the host store (optionally its lowest share into the compressed tier).
 * Evicted positions never come back.
 */
inline TierState assign_tiers(const ScoreVector& scores,
                              std::span<const Position> protected_positions,
                              const HierarchyConfig& cfg,
                              TierState state) {
    cfg.validate();
    const std::size_t n = state.size();
    std::vector<char> is_protected(n, 0);
    for (Position p : protected_positions) {
        require(p < n, "protected position " + std::to_string(p) + " out of range");
        is_protected[p] = 1;
    }
    std::vector<Position> candidates;
    for (Position p = 0; p < n; ++p) {
        if (state.tier_of[p] == Tier::evicted) {
            continue;
        }
        if (is_protected[p]) {
            state.tier_of[p] = Tier::hbm;
            state.cpu_store.erase(p);
            continue;
        }
        require(p < scores.size(), "scores missing live position " + std::to_string(p));
        candidates.push_back(p);
    }

    const auto order = ascending_order(scores.s, candidates);
    const std::size_t n_evict = floor_fraction(cfg.evict_ratio, order.size());
    const std::size_t survivors = order.size() - n_evict;
    const std::size_t n_hbm = floor_fraction(cfg.beta, survivors);
    const std::size_t n_host = survivors - n_hbm;
    const std::size_t n_compressed = cfg.t2_enabled ? floor_fraction(cfg.t2_fraction, n_host) : 0;

    for (std::size_t k = 0; k < order.size(); ++k) {
        const Position p = order[k];
        if (k < n_evict) {
            state.tier_of[p] = Tier::evicted;
            state.cpu_store.erase(p);
            state.staging.erase(p);
        } else if (k < n_evict + n_compressed) {
            state.tier_of[p] = Tier::compressed;
            state.cpu_store.insert(p);
        } else if (k < n_evict + n_host) {
            state.tier_of[p] = Tier::ddr;
            state.cpu_store.insert(p);
        } else {
            state.tier_of[p] = Tier::hbm;
            state.cpu_store.erase(p);
            state.staging.erase(p);
        }
    }
    return state;
}

/// Host entries not yet in the staging buffer; the buffer then mirrors `current`.
inline std::vector<Position> differential_prefetch(TierState& state, std::span<const Position> current) {
    std::vector<Position> transfer;
    for (Position p : current) {
        if (!state.staging.contains(p)) {
            transfer.push_back(p);
        }
    }
    state.staging = std::set<Position>(current.begin(), current.end());
    return transfer;
}

enum class PrefetchMode {
    differential,  // staging buffer persists; only new host entries cross PCIe
    full_store,    // the whole host store crosses PCIe before every step
};

struct StepOptions {
    PrefetchMode prefetch = PrefetchMode::differential;
    std::uint64_t bytes_per_token = 0;
    std::uint64_t compressed_bytes_per_token = 0;
    /// Replaces the cumulative score as the manage-event ranking when set.
    std::function<ScoreVector(const ScoreVector& cumulative, const TierState& state)> ranking;
};

struct StepOutcome {
    TierState state;
    ScoreVector scores;
    std::vector<Position> prefetch_set;  // CPU -> GPU before this step's attention
    std::vector<Position> offload_set;   // GPU -> CPU at this step's manage event
    std::vector<Position> evicted_set;   // newly evicted at this step's manage event
    bool managed = false;
    TierCensus census;
};

/**
 * One decode step after its attention was computed over state.visible():
 * prefetch accounting, cumulative score update, management every
 * manage_interval steps (never at step 0), census.
 */
inline StepOutcome step(TierState state,
                        ScoreVector scores,
                        const StepAttention& attn,
                        const HierarchyConfig& cfg,
                        const StepOptions& options = {}) {
    StepOutcome out;
    const std::vector<Position> host(state.cpu_store.begin(), state.cpu_store.end());
    if (options.prefetch == PrefetchMode::differential) {
        out.prefetch_set = differential_prefetch(state, host);
    } else {
        out.prefetch_set = host;
    }

    accumulate(scores, attn);

    if (state.step > 0 && state.step % static_cast<std::int64_t>(cfg.manage_interval) == 0) {
        const auto before = state.tier_of;
        const auto generated = state.size() - std::min(cfg.prompt_len, state.size());
        const auto prot = protected_set(generated, cfg);
        const ScoreVector ranking = options.ranking ? options.ranking(scores, state) : scores;
        state = assign_tiers(ranking, prot, cfg, std::move(state));
        for (Position p = 0; p < before.size(); ++p) {
            const Tier now = state.tier_of[p];
            if (now == Tier::evicted && before[p] != Tier::evicted) {
                out.evicted_set.push_back(p);
            } else if ((now == Tier::ddr || now == Tier::compressed) && before[p] == Tier::hbm) {
                out.offload_set.push_back(p);
            }
        }
        out.managed = true;
    }

    out.census = take_census(state, options.bytes_per_token, options.compressed_bytes_per_token);
    ++state.step;
    out.state = std::move(state);
    out.scores = std::move(scores);
    return out;
}

}  // namespace kvtier
