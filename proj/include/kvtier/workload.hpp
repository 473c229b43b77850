// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvtier/rng.hpp"
#include "kvtier/scoring.hpp"
#include "kvtier/types.hpp"

namespace kvtier {

struct TraceShape {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t head_dim = 8;
    std::size_t prompt_len = 32;
    std::size_t chain_len = 512;

    void validate() const {
        require(n_layers > 0 && n_heads > 0 && head_dim > 0, "trace shape: L, H, d must be positive");
        require(chain_len >= 1, "trace shape: chain length must be >= 1");
    }

    /// Cache size while decoding step t (the step's own token included).
    std::size_t positions_at(std::size_t step) const { return prompt_len + step + 1; }
    std::size_t total_positions() const { return prompt_len + chain_len; }

    bool operator==(const TraceShape&) const = default;
};

/**
 * Full-cache attention weights for every decode step, layer and head. Step t
 * holds rows of length prompt_len + t + 1. A NaN layer is stored as rows of
 * quiet NaNs.
 */
class AttentionTrace {
public:
    AttentionTrace() = default;
    explicit AttentionTrace(TraceShape shape) : m_shape(shape) {
        shape.validate();
        const std::size_t lh = shape.n_layers * shape.n_heads;
        m_offsets.resize(shape.chain_len + 1, 0);
        for (std::size_t t = 0; t < shape.chain_len; ++t) {
            m_offsets[t + 1] = m_offsets[t] + lh * shape.positions_at(t);
        }
        m_weights.assign(m_offsets.back(), 0.0);
    }

    const TraceShape& shape() const { return m_shape; }
    std::size_t steps() const { return m_shape.chain_len; }

    std::span<double> row(std::size_t t, std::size_t layer, std::size_t head) {
        const std::size_t n = m_shape.positions_at(t);
        return {m_weights.data() + m_offsets[t] + (layer * m_shape.n_heads + head) * n, n};
    }
    std::span<const double> row(std::size_t t, std::size_t layer, std::size_t head) const {
        const std::size_t n = m_shape.positions_at(t);
        return {m_weights.data() + m_offsets[t] + (layer * m_shape.n_heads + head) * n, n};
    }

    bool is_nan_layer(std::size_t t, std::size_t layer) const { return std::isnan(row(t, layer, 0)[0]); }

    void set_nan_layer(std::size_t t, std::size_t layer) {
        for (std::size_t h = 0; h < m_shape.n_heads; ++h) {
            auto r = row(t, layer, h);
            std::fill(r.begin(), r.end(), std::numeric_limits<double>::quiet_NaN());
        }
    }

    /// Full-cache weights of step t in StepAttention form.
    StepAttention step_attention(std::size_t t) const {
        StepAttention a(m_shape.n_layers, m_shape.n_heads, m_shape.positions_at(t));
        for (std::size_t l = 0; l < m_shape.n_layers; ++l) {
            a.nan_layer[l] = is_nan_layer(t, l) ? 1 : 0;
            for (std::size_t h = 0; h < m_shape.n_heads; ++h) {
                const auto r = row(t, l, h);
                std::copy(r.begin(), r.end(), a.row(l, h).begin());
            }
        }
        return a;
    }

    std::vector<double>& data() { return m_weights; }
    const std::vector<double>& data() const { return m_weights; }

    /// Bitwise comparison (NaN rows compare equal to identical NaN rows).
    bool bitwise_equal(const AttentionTrace& other) const {
        return m_shape == other.m_shape && m_weights.size() == other.m_weights.size() &&
               std::memcmp(m_weights.data(), other.m_weights.data(), m_weights.size() * sizeof(double)) == 0;
    }

    /// Throws unless every non-NaN row is a probability simplex within `tolerance`
    /// and every NaN layer is NaN across all of its heads.
    void validate(double tolerance = 1e-9) const {
        for (std::size_t t = 0; t < steps(); ++t) {
            for (std::size_t l = 0; l < m_shape.n_layers; ++l) {
                const bool nan_layer = is_nan_layer(t, l);
                for (std::size_t h = 0; h < m_shape.n_heads; ++h) {
                    const auto r = row(t, l, h);
                    const std::string where = "step " + std::to_string(t) + " layer " + std::to_string(l) +
                                              " head " + std::to_string(h);
                    if (nan_layer) {
                        for (double w : r) {
                            require(std::isnan(w), "partially NaN layer at " + where);
                        }
                        continue;
                    }
                    double sum = 0.0;
                    for (double w : r) {
                        require(std::isfinite(w) && w >= 0.0, "invalid attention weight at " + where);
                        sum += w;
                    }
                    require(std::abs(sum - 1.0) <= tolerance,
                            "non-simplex row at " + where + " (sum " + std::to_string(sum) + ")");
                }
            }
        }
    }

private:
    TraceShape m_shape;
    std::vector<std::size_t> m_offsets;
    std::vector<double> m_weights;
};

/// A replayable decode: attention weights plus the keys and values they refer to.
struct Workload {
    AttentionTrace trace;
    KvTensor keys;
    KvTensor values;

    const TraceShape& shape() const { return trace.shape(); }

    bool bitwise_equal(const Workload& other) const {
        return trace.bitwise_equal(other.trace) && keys == other.keys && values == other.values;
    }
};

/// Share of total mass held by the top ceil(quantile * n) scores.
inline double measure_concentration(std::span<const double> scores, double quantile) {
    require(!scores.empty(), "measure_concentration: empty scores");
    require(quantile > 0.0 && quantile <= 1.0, "measure_concentration: quantile must be in (0,1]");
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
    require(total > 0.0, "measure_concentration: zero total mass");
    const auto k = static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(sorted.size()) - 1e-9));
    const double top = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), 0.0);
    return top / total;
}

/// Cumulative scores of a full-cache replay of the trace.
inline ScoreVector cumulative_scores(const AttentionTrace& trace) {
    ScoreVector s;
    for (std::size_t t = 0; t < trace.steps(); ++t) {
        accumulate(s, trace.step_attention(t));
    }
    return s;
}

namespace detail {

inline KvTensor random_tensor(const TraceShape& shape, std::uint64_t seed) {
    KvTensor out(shape.n_layers, shape.n_heads, shape.total_positions(), shape.head_dim);
    Rng rng(seed);
    for (double& x : out.data()) {
        x = rng.normal();
    }
    return out;
}

}  // namespace detail

struct LongTailOptions {
    double quantile = 0.2;
    double jitter_sigma = 0.5;            // log-normal per (layer, head, position) preference noise
    std::vector<std::size_t> nan_layers;  // layers reported as NaN ...
    std::size_t nan_from_step = 0;        // ... from this step on
};

/**
 * Zipf-like position preference: every position gets a random preference
 * rank, and head (l,h) attends to position i with weight proportional to
 * rank_i^-exponent * jitter_{l,h,i} over the positions visible at the step.
 */
class LongTailProfile {
public:
    LongTailProfile(const TraceShape& shape, std::uint64_t seed, const LongTailOptions& options)
        : m_shape(shape), m_options(options) {
        shape.validate();
        for (std::size_t l : options.nan_layers) {
            require(l < shape.n_layers, "long-tail: NaN layer out of range");
        }
        require(options.nan_layers.size() < shape.n_layers || options.nan_from_step >= shape.chain_len,
                "long-tail: at least one layer must stay valid");
        const std::size_t n = shape.total_positions();
        m_rank.resize(n);
        std::iota(m_rank.begin(), m_rank.end(), 1.0);
        Rng perm(mix_seed(seed, 0));
        for (std::size_t i = n; i > 1; --i) {
            std::swap(m_rank[i - 1], m_rank[perm.index(i)]);
        }
        Rng jitter(mix_seed(seed, 1));
        m_jitter.resize(shape.n_layers * shape.n_heads * n);
        for (double& j : m_jitter) {
            j = std::exp(options.jitter_sigma * jitter.normal());
        }
    }

    bool layer_is_nan(std::size_t t, std::size_t layer) const {
        return t >= m_options.nan_from_step &&
               std::find(m_options.nan_layers.begin(), m_options.nan_layers.end(), layer) !=
                   m_options.nan_layers.end();
    }

    std::size_t valid_layers(std::size_t t) const {
        std::size_t v = 0;
        for (std::size_t l = 0; l < m_shape.n_layers; ++l) {
            v += layer_is_nan(t, l) ? 0 : 1;
        }
        return v;
    }

    /// Unnormalized preference of head (l,h) for every position.
    std::vector<double> preference(double exponent, std::size_t layer, std::size_t head) const {
        const std::size_t n = m_shape.total_positions();
        std::vector<double> x(n);
        const double* jit = m_jitter.data() + (layer * m_shape.n_heads + head) * n;
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = std::pow(m_rank[i], -exponent) * jit[i];
        }
        return x;
    }

    /// Closed-form cumulative scores of a full-cache replay (prefix/suffix sums).
    std::vector<double> cumulative(double exponent) const {
        const std::size_t n = m_shape.total_positions();
        const std::size_t steps = m_shape.chain_len;
        const double heads = static_cast<double>(m_shape.n_heads);
        std::vector<double> s(n, 0.0);
        std::vector<double> prefix(n);
        std::vector<double> suffix(steps + 1);
        for (std::size_t l = 0; l < m_shape.n_layers; ++l) {
            for (std::size_t h = 0; h < m_shape.n_heads; ++h) {
                const auto x = preference(exponent, l, h);
                std::partial_sum(x.begin(), x.end(), prefix.begin());
                suffix[steps] = 0.0;
                for (std::size_t t = steps; t-- > 0;) {
                    double c = 0.0;
                    if (!layer_is_nan(t, l)) {
                        c = 1.0 / (prefix[m_shape.positions_at(t) - 1] * heads *
                                   static_cast<double>(valid_layers(t)));
                    }
                    suffix[t] = suffix[t + 1] + c;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t first = i > m_shape.prompt_len ? i - m_shape.prompt_len : 0;
                    s[i] += x[i] * suffix[first];
                }
            }
        }
        return s;
    }

    double share(double exponent) const { return measure_concentration(cumulative(exponent), m_options.quantile); }

    AttentionTrace materialize(double exponent) const {
        AttentionTrace trace(m_shape);
        for (std::size_t l = 0; l < m_shape.n_layers; ++l) {
            for (std::size_t h = 0; h < m_shape.n_heads; ++h) {
                const auto x = preference(exponent, l, h);
                double z = 0.0;
                for (std::size_t t = 0; t < m_shape.chain_len; ++t) {
                    const std::size_t n = m_shape.positions_at(t);
                    if (t == 0) {
                        for (std::size_t i = 0; i < n; ++i) {
                            z += x[i];
                        }
                    } else {
                        z += x[n - 1];
                    }
                    auto r = trace.row(t, l, h);
                    for (std::size_t i = 0; i < n; ++i) {
                        r[i] = x[i] / z;
                    }
                }
            }
        }
        for (std::size_t t = m_options.nan_from_step; t < m_shape.chain_len; ++t) {
            for (std::size_t l : m_options.nan_layers) {
                trace.set_nan_layer(t, l);
            }
        }
        return trace;
    }

private:
    TraceShape m_shape;
    LongTailOptions m_options;
    std::vector<double> m_rank;
    std::vector<double> m_jitter;
};

struct LongTailTrace {
    Workload workload;
    double exponent = 0.0;
    double realized_share = 0.0;  // measured on the materialized trace
};

/**
 * Long-tail trace whose cumulative-score top-quantile share matches `target`.
 * The Zipf exponent is found by bisection; exponent 0 (uniform preference) is
 * the least concentrated member of the family, so targets below its share are
 * rejected as unreachable.
 */
inline LongTailTrace gen_longtail_trace(const TraceShape& shape,
                                        double target,
                                        std::uint64_t seed,
                                        const LongTailOptions& options = {}) {
    require(target > options.quantile && target < 1.0, "long-tail: target must lie in (quantile, 1)");
    const LongTailProfile profile(shape, seed, options);

    const double floor_share = profile.share(0.0);
    require(floor_share <= target + 0.01,
            "long-tail: target " + std::to_string(target) + " unreachable, uniform preference already gives " +
                std::to_string(floor_share));
    double lo = 0.0;
    double hi = 1.0;
    while (profile.share(hi) < target) {
        lo = hi;
        hi *= 2.0;
        require(hi <= 64.0, "long-tail: target " + std::to_string(target) + " unreachable");
    }
    double exponent = floor_share >= target ? 0.0 : 0.5 * (lo + hi);
    if (floor_share < target) {
        for (int iter = 0; iter < 60; ++iter) {
            exponent = 0.5 * (lo + hi);
            const double s = profile.share(exponent);
            if (std::abs(s - target) < 1e-7) {
                break;
            }
            (s < target ? lo : hi) = exponent;
        }
    }

    LongTailTrace out;
    out.exponent = exponent;
    out.workload.trace = profile.materialize(exponent);
    out.workload.keys = detail::random_tensor(shape, mix_seed(seed, 2));
    out.workload.values = detail::random_tensor(shape, mix_seed(seed, 3));
    out.realized_share = measure_concentration(cumulative_scores(out.workload.trace).s, options.quantile);
    require(std::abs(out.realized_share - target) <= 0.01,
            "long-tail: calibration missed target (" + std::to_string(out.realized_share) + ")");
    return out;
}

// ---------------------------------------------------------------------------
// Needle recall

struct RecallOptions {
    std::size_t sink_size = 4;
    std::size_t window_size = 128;
    std::size_t first_needle_offset = 8;  // generated-token offset of the first needle
    std::size_t needle_spacing = 4;
    std::size_t query_period = 8;         // decode steps between scheduled retrievals
    double needle_logit = 12.0;           // q.k/sqrt(d) of a retrieval query on its needle
    double distractor_key_scale = 0.3;
    double query_scale = 0.5;             // std of ordinary decode queries
    double tolerance = 0.1;               // relative output error counted as a successful retrieval
};

struct RecallQuery {
    std::size_t step = 0;
    std::size_t needle = 0;
};

struct RecallTask {
    std::vector<Position> needles;
    std::vector<RecallQuery> schedule;
    double tolerance = 0.1;
};

struct RecallWorkload {
    RecallTask task;
    Workload workload;
};

/**
 * Synthetic recall workload. Each needle position has, per (layer, head), a
 * key along its own near-orthogonal direction; a scheduled retrieval query is
 * aligned with that key so that it puts nearly all of its mass on the needle.
 * The payload is the needle's value vector. Ordinary steps use small random
 * queries. Every retrieval happens while its needle lies outside the recent
 * window.
 */
inline RecallWorkload gen_recall_task(const TraceShape& shape,
                                      std::size_t n_needles,
                                      std::uint64_t seed,
                                      const RecallOptions& options = {}) {
    shape.validate();
    require(n_needles >= 1, "recall: need at least one needle");
    require(options.first_needle_offset >= options.sink_size, "recall: needles must not be sink tokens");
    require(options.query_period >= 1 && options.needle_spacing >= 1, "recall: period and spacing must be >= 1");

    RecallWorkload out;
    RecallTask& task = out.task;
    task.tolerance = options.tolerance;
    for (std::size_t j = 0; j < n_needles; ++j) {
        task.needles.push_back(shape.prompt_len + options.first_needle_offset + j * options.needle_spacing);
    }
    const Position last_needle = task.needles.back();
    require(last_needle < shape.total_positions(), "infeasible geometry: needles beyond the chain");
    // Needle p is outside the window at step t iff p < positions_at(t) - window.
    const std::size_t first_query = last_needle + options.window_size - shape.prompt_len;
    for (std::size_t t = first_query, k = 0; t < shape.chain_len; t += options.query_period, ++k) {
        task.schedule.push_back({t, k % n_needles});
    }
    require(task.schedule.size() >= n_needles,
            "infeasible geometry: the window covers the needles for too much of the chain");

    const std::size_t n = shape.total_positions();
    const std::size_t d = shape.head_dim;
    const double sqrt_d = std::sqrt(static_cast<double>(d));
    const double needle_norm = std::sqrt(options.needle_logit * sqrt_d);

    Workload& w = out.workload;
    w.trace = AttentionTrace(shape);
    w.values = detail::random_tensor(shape, mix_seed(seed, 3));
    w.keys = KvTensor(shape.n_layers, shape.n_heads, n, d);
    Rng key_rng(mix_seed(seed, 2));
    Rng query_rng(mix_seed(seed, 4));

    std::vector<std::size_t> needle_at(n, n_needles);
    for (std::size_t j = 0; j < n_needles; ++j) {
        needle_at[task.needles[j]] = j;
    }
    std::vector<std::size_t> retrieval_at(shape.chain_len, n_needles);
    for (const auto& q : task.schedule) {
        retrieval_at[q.step] = q.needle;
    }

    std::vector<double> logits(n);
    Vector query(d);
    for (std::size_t l = 0; l < shape.n_layers; ++l) {
        for (std::size_t h = 0; h < shape.n_heads; ++h) {
            // Gram-Schmidt over random normals; exactly orthogonal while n_needles <= d.
            std::vector<Vector> dirs;
            for (std::size_t j = 0; j < n_needles; ++j) {
                Vector u(d);
                for (double& x : u) {
                    x = key_rng.normal();
                }
                if (dirs.size() < d) {
                    for (const auto& prev : dirs) {
                        const double c = dot(u, prev);
                        for (std::size_t k = 0; k < d; ++k) {
                            u[k] -= c * prev[k];
                        }
                    }
                }
                const double norm = l2_norm(u);
                for (double& x : u) {
                    x /= norm;
                }
                dirs.push_back(u);
            }
            for (Position p = 0; p < n; ++p) {
                auto k = w.keys.at(l, h, p);
                if (needle_at[p] < n_needles) {
                    for (std::size_t c = 0; c < d; ++c) {
                        k[c] = needle_norm * dirs[needle_at[p]][c];
                    }
                } else {
                    for (double& x : k) {
                        x = options.distractor_key_scale * key_rng.normal();
                    }
                }
            }
            const auto keys = w.keys.head_block(l, h);
            for (std::size_t t = 0; t < shape.chain_len; ++t) {
                if (retrieval_at[t] < n_needles) {
                    for (std::size_t c = 0; c < d; ++c) {
                        query[c] = needle_norm * dirs[retrieval_at[t]][c];
                    }
                } else {
                    for (double& x : query) {
                        x = options.query_scale * query_rng.normal();
                    }
                }
                const std::size_t visible = shape.positions_at(t);
                double max_logit = -std::numeric_limits<double>::infinity();
                for (Position p = 0; p < visible; ++p) {
                    logits[p] = dot(query, keys.subspan(p * d, d)) / sqrt_d;
                    max_logit = std::max(max_logit, logits[p]);
                }
                double z = 0.0;
                for (Position p = 0; p < visible; ++p) {
                    logits[p] = std::exp(logits[p] - max_logit);
                    z += logits[p];
                }
                auto r = w.trace.row(t, l, h);
                for (Position p = 0; p < visible; ++p) {
                    r[p] = logits[p] / z;
                }
            }
        }
    }
    return out;
}

}  // namespace kvtier
