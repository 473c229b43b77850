// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kvtier/types.hpp"

namespace kvtier {

// Single-head softmax attention in float64. Every reduction runs in ascending
// position order so that results over the same visible set are bitwise
// reproducible regardless of how the cache is partitioned.

namespace detail {

inline std::size_t check_dims(std::span<const double> query, std::span<const Vector> keys) {
    require(!query.empty(), "attention: dimension must be >= 1");
    require(!keys.empty(), "attention: keys must be nonempty");
    for (std::size_t i = 0; i < keys.size(); ++i) {
        require(keys[i].size() == query.size(),
                "attention: dimension mismatch at key " + std::to_string(i));
    }
    return query.size();
}

inline void check_values(std::span<const Vector> values, std::size_t n, std::size_t dim) {
    require(values.size() == n, "attention: |keys| != |values|");
    for (std::size_t i = 0; i < values.size(); ++i) {
        require(values[i].size() == dim,
                "attention: dimension mismatch at value " + std::to_string(i));
    }
}

/// survivor[i] == 1 iff position i participates; rejects out-of-range positions.
inline std::vector<char> survivor_mask(std::size_t n, std::span<const Position> evicted) {
    std::vector<char> keep(n, 1);
    for (Position p : evicted) {
        require(p < n, "evicted position " + std::to_string(p) + " out of range");
        keep[p] = 0;
    }
    return keep;
}

inline std::vector<double> masked_softmax(std::span<const double> query,
                                          std::span<const Vector> keys,
                                          const std::vector<char>& keep) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
    std::vector<double> w(keys.size(), 0.0);
    double max_logit = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (!keep[i]) {
            continue;
        }
        w[i] = dot(query, keys[i]) * scale;
        max_logit = std::max(max_logit, w[i]);
        any = true;
    }
    require(any, "empty survivor set");
    double z = 0.0;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (keep[i]) {
            w[i] = std::exp(w[i] - max_logit);
            z += w[i];
        }
    }
    for (std::size_t i = 0; i < keys.size(); ++i) {
        w[i] = keep[i] ? w[i] / z : 0.0;
    }
    return w;
}

}  // namespace detail

/// Softmax of q.k_i / sqrt(d) over all keys.
inline std::vector<double> attention_weights(std::span<const double> query, std::span<const Vector> keys) {
    detail::check_dims(query, keys);
    return detail::masked_softmax(query, keys, std::vector<char>(keys.size(), 1));
}

/// Sum of weights[i] * values[i] over positions with weight entries, ascending.
inline Vector weighted_sum(std::span<const double> weights, std::span<const Vector> values) {
    require(weights.size() == values.size(), "weighted_sum: |weights| != |values|");
    require(!values.empty(), "weighted_sum: values must be nonempty");
    Vector out(values.front().size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (weights[i] == 0.0) {
            continue;
        }
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += weights[i] * values[i][j];
        }
    }
    return out;
}

/// Attention output after removing `evicted`; the softmax is renormalized over survivors.
inline Vector evicted_attention_output(std::span<const double> query,
                                       std::span<const Vector> keys,
                                       std::span<const Vector> values,
                                       std::span<const Position> evicted) {
    const std::size_t dim = detail::check_dims(query, keys);
    detail::check_values(values, keys.size(), dim);
    const auto keep = detail::survivor_mask(keys.size(), evicted);
    return weighted_sum(detail::masked_softmax(query, keys, keep), values);
}

inline Vector attention_output(std::span<const double> query,
                               std::span<const Vector> keys,
                               std::span<const Vector> values) {
    return evicted_attention_output(query, keys, values, {});
}

/**
 * Output over the `visible` positions given full-cache softmax weights.
 *
 * Renormalizing softmax weights over a subset equals the softmax restricted to
 * that subset, so this is the same quantity as evicted_attention_output when
 * only the weights are recorded. `values` is a contiguous block of
 * weights.size() vectors of length `dim`; `visible` must be ascending.
 */
inline Vector renormalized_output(std::span<const double> weights,
                                  std::span<const double> values,
                                  std::size_t dim,
                                  std::span<const Position> visible) {
    require(!visible.empty(), "empty survivor set");
    double z = 0.0;
    for (Position p : visible) {
        z += weights[p];
    }
    require(z > 0.0, "renormalized_output: visible set has zero attention mass");
    Vector out(dim, 0.0);
    for (Position p : visible) {
        const double a = weights[p] / z;
        const double* v = values.data() + p * dim;
        for (std::size_t j = 0; j < dim; ++j) {
            out[j] += a * v[j];
        }
    }
    return out;
}

/// Upper bound 2 * sum_{i in evicted} weights[i] * ||v_i|| on ||o_hat - o||; weights must be full-cache.
inline double eviction_error_bound(std::span<const double> weights,
                                   std::span<const Vector> values,
                                   std::span<const Position> evicted) {
    require(weights.size() == values.size(), "eviction_error_bound: |weights| != |values|");
    const auto keep = detail::survivor_mask(weights.size(), evicted);
    double bound = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (!keep[i]) {
            bound += weights[i] * l2_norm(values[i]);
        }
    }
    return 2.0 * bound;
}

/**
 * sum_{i in evicted} weights[i] * ||o_hat - v_i||, which is always >= ||o_hat - o||
 * because o_hat - o equals sum_{i in evicted} weights[i] * (o_hat - v_i) exactly.
 * The doubled-norm bound above drops the ||o_hat|| term and can be exceeded
 * when the survivors' output is longer than the evicted values.
 */
inline double residual_error_bound(std::span<const double> weights,
                                   std::span<const Vector> values,
                                   std::span<const Position> evicted,
                                   std::span<const double> output_hat) {
    require(weights.size() == values.size(), "residual_error_bound: |weights| != |values|");
    const auto keep = detail::survivor_mask(weights.size(), evicted);
    double bound = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (!keep[i]) {
            bound += weights[i] * l2_distance(output_hat, values[i]);
        }
    }
    return bound;
}

}  // namespace kvtier
