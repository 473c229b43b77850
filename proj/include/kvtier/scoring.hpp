// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvtier/attention.hpp"
#include "kvtier/types.hpp"

namespace kvtier {

/**
 * Attention weights of one decode step for every (layer, head), over absolute
 * positions 0..n_positions-1. Positions the step could not see carry weight 0.
 * Layers flagged in nan_layer are excluded from every average.
 */
struct StepAttention {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t n_positions = 0;
    std::vector<double> weights;   // [layer][head][position]
    std::vector<char> nan_layer;   // one flag per layer

    StepAttention() = default;
    StepAttention(std::size_t layers, std::size_t heads, std::size_t positions)
        : n_layers(layers),
          n_heads(heads),
          n_positions(positions),
          weights(layers * heads * positions, 0.0),
          nan_layer(layers, 0) {}

    std::span<double> row(std::size_t layer, std::size_t head) {
        return {weights.data() + (layer * n_heads + head) * n_positions, n_positions};
    }
    std::span<const double> row(std::size_t layer, std::size_t head) const {
        return {weights.data() + (layer * n_heads + head) * n_positions, n_positions};
    }

    std::size_t valid_layers() const {
        return static_cast<std::size_t>(std::count(nan_layer.begin(), nan_layer.end(), 0));
    }
};

/// Per-position importance. For the cumulative scorer s[i] never decreases.
struct ScoreVector {
    std::vector<double> s;
    std::int64_t last_updated_step = -1;

    std::size_t size() const { return s.size(); }
    double operator[](std::size_t i) const { return s[i]; }
};

/// Mean over non-NaN layers of the mean over heads, per position.
inline std::vector<double> layer_head_mean(const StepAttention& attn) {
    const std::size_t valid = attn.valid_layers();
    require(valid > 0, "no valid layers");
    std::vector<double> mean(attn.n_positions, 0.0);
    std::vector<double> layer_acc(attn.n_positions);
    for (std::size_t l = 0; l < attn.n_layers; ++l) {
        if (attn.nan_layer[l]) {
            continue;
        }
        std::fill(layer_acc.begin(), layer_acc.end(), 0.0);
        for (std::size_t h = 0; h < attn.n_heads; ++h) {
            const auto r = attn.row(l, h);
            for (std::size_t i = 0; i < attn.n_positions; ++i) {
                layer_acc[i] += r[i];
            }
        }
        for (std::size_t i = 0; i < attn.n_positions; ++i) {
            mean[i] += layer_acc[i] / static_cast<double>(attn.n_heads);
        }
    }
    for (double& m : mean) {
        m /= static_cast<double>(valid);
    }
    return mean;
}

/// In-place cumulative update; new positions enter with score 0.
inline void accumulate(ScoreVector& scores, const StepAttention& attn) {
    require(attn.n_positions >= scores.s.size(),
            "step attention covers " + std::to_string(attn.n_positions) + " positions but " +
                std::to_string(scores.s.size()) + " are scored");
    const auto mean = layer_head_mean(attn);
    scores.s.resize(attn.n_positions, 0.0);
    for (std::size_t i = 0; i < mean.size(); ++i) {
        scores.s[i] += mean[i];
    }
    ++scores.last_updated_step;
}

inline ScoreVector update_cumulative(ScoreVector scores, const StepAttention& attn) {
    accumulate(scores, attn);
    return scores;
}

/// Candidates sorted by ascending score; equal scores keep ascending position order.
inline std::vector<Position> ascending_order(std::span<const double> score,
                                             std::span<const Position> candidates) {
    std::vector<Position> order(candidates.begin(), candidates.end());
    for (Position p : order) {
        require(p < score.size(), "score missing for live position " + std::to_string(p));
        require(!std::isnan(score[p]), "NaN score at position " + std::to_string(p));
    }
    std::sort(order.begin(), order.end());
    std::stable_sort(order.begin(), order.end(),
                     [&](Position a, Position b) { return score[a] < score[b]; });
    return order;
}

inline std::vector<Position> ascending_order(std::span<const double> score) {
    std::vector<Position> all(score.size());
    std::iota(all.begin(), all.end(), Position{0});
    return ascending_order(score, all);
}

/// 1-based ranks with ties sharing the average of their rank span.
inline std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    return ranks;
}

inline double spearman_rho(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "spearman_rho: length mismatch");
    require(a.size() >= 2, "spearman_rho: need at least 2 elements");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean = (n + 1.0) / 2.0;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - mean) * (rb[i] - mean);
        saa += (ra[i] - mean) * (ra[i] - mean);
        sbb += (rb[i] - mean) * (rb[i] - mean);
    }
    require(saa > 0.0 && sbb > 0.0, "undefined correlation");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Per-position ||v|| averaged over all layers and heads.
inline std::vector<double> mean_value_norms(const KvTensor& values) {
    std::vector<double> norms(values.n_positions(), 0.0);
    const double count = static_cast<double>(values.n_layers() * values.n_heads());
    for (std::size_t l = 0; l < values.n_layers(); ++l) {
        for (std::size_t h = 0; h < values.n_heads(); ++h) {
            for (Position p = 0; p < values.n_positions(); ++p) {
                norms[p] += l2_norm(values.at(l, h, p));
            }
        }
    }
    for (double& n : norms) {
        n /= count;
    }
    return norms;
}

/// One key per position: the concatenation of its keys across layers and heads.
inline std::vector<Vector> representative_keys(const KvTensor& keys, std::size_t n_positions) {
    require(n_positions <= keys.n_positions(), "representative_keys: position out of range");
    std::vector<Vector> out(n_positions);
    for (Position p = 0; p < n_positions; ++p) {
        out[p].reserve(keys.n_layers() * keys.n_heads() * keys.head_dim());
        for (std::size_t l = 0; l < keys.n_layers(); ++l) {
            for (std::size_t h = 0; h < keys.n_heads(); ++h) {
                const auto k = keys.at(l, h, p);
                out[p].insert(out[p].end(), k.begin(), k.end());
            }
        }
    }
    return out;
}

inline ScoreVector score_vatp(const ScoreVector& cumulative, std::span<const double> value_norms) {
    require(value_norms.size() == cumulative.size(), "score_vatp: length mismatch");
    ScoreVector out = cumulative;
    for (std::size_t i = 0; i < out.s.size(); ++i) {
        require(value_norms[i] >= 0.0, "score_vatp: negative value norm");
        out.s[i] *= value_norms[i];
    }
    return out;
}

/// Max cosine similarity of each key with its existing immediate neighbours.
inline std::vector<double> neighbor_redundancy(std::span<const Vector> keys) {
    std::vector<double> r(keys.size(), 0.0);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        double best = -1.0;
        bool any = false;
        if (i > 0) {
            best = std::max(best, cosine_similarity(keys[i], keys[i - 1]));
            any = true;
        }
        if (i + 1 < keys.size()) {
            best = std::max(best, cosine_similarity(keys[i], keys[i + 1]));
            any = true;
        }
        r[i] = any ? best : 0.0;
    }
    return r;
}

inline ScoreVector score_redundancy(std::span<const Vector> keys, const ScoreVector& base) {
    require(keys.size() == base.size(), "score_redundancy: length mismatch");
    const auto r = neighbor_redundancy(keys);
    ScoreVector out = base;
    for (std::size_t i = 0; i < out.s.size(); ++i) {
        out.s[i] -= r[i];
    }
    return out;
}

/// attention x value norm - neighbour redundancy.
inline ScoreVector score_combined(std::span<const Vector> keys,
                                  const ScoreVector& base,
                                  std::span<const double> value_norms) {
    return score_redundancy(keys, score_vatp(base, value_norms));
}

struct RkvParams {
    double lambda = 0.07;
    std::size_t alpha_window = 8;
    std::size_t pool_kernel = 7;

    void validate() const {
        require(lambda >= 0.0 && lambda <= 1.0, "rkv: lambda must be in [0,1]");
        require(alpha_window >= 1, "rkv: alpha_window must be >= 1");
        require(pool_kernel % 2 == 1, "rkv: pool_kernel must be odd");
    }
};

/// Centered max-pool; the window is truncated at both sequence ends.
inline std::vector<double> max_pool(std::span<const double> x, std::size_t kernel) {
    const std::size_t half = kernel / 2;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(x.size() - 1, i + half);
        out[i] = *std::max_element(x.begin() + static_cast<std::ptrdiff_t>(lo),
                                   x.begin() + static_cast<std::ptrdiff_t>(hi) + 1);
    }
    return out;
}

/// Mean attention each position received over the given steps (absent positions count as 0).
inline std::vector<double> windowed_mean_attention(std::span<const StepAttention> steps, std::size_t n_positions) {
    require(!steps.empty(), "windowed attention needs at least one step");
    std::vector<double> mean(n_positions, 0.0);
    for (const auto& step : steps) {
        require(step.n_positions <= n_positions, "windowed attention: step wider than key set");
        const auto m = layer_head_mean(step);
        for (std::size_t i = 0; i < m.size(); ++i) {
            mean[i] += m[i];
        }
    }
    for (double& m : mean) {
        m /= static_cast<double>(steps.size());
    }
    return mean;
}

/**
 * Joint importance/redundancy score Z_i = lambda*I_i - (1-lambda)*R_i.
 *
 * I is the max-pooled mean attention paid by the last alpha_window steps
 * (all available steps if fewer were observed). R_i is the max cosine
 * similarity of key i to any other key in `candidates`; an empty candidate
 * list means every position.
 */
inline ScoreVector score_rkv(std::span<const StepAttention> recent,
                             std::span<const Vector> keys,
                             const RkvParams& params,
                             std::span<const Position> candidates = {}) {
    params.validate();
    require(!recent.empty(), "score_rkv: no observed steps");
    const std::size_t used = std::min(params.alpha_window, recent.size());
    const auto window = recent.subspan(recent.size() - used);
    const auto importance = max_pool(windowed_mean_attention(window, keys.size()), params.pool_kernel);

    std::vector<Position> pool(candidates.begin(), candidates.end());
    if (pool.empty()) {
        pool.resize(keys.size());
        std::iota(pool.begin(), pool.end(), Position{0});
    }
    ScoreVector out;
    out.s.resize(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        double redundancy = 0.0;
        bool any = false;
        for (Position j : pool) {
            require(j < keys.size(), "score_rkv: candidate out of range");
            if (j == i) {
                continue;
            }
            const double c = cosine_similarity(keys[i], keys[j]);
            redundancy = any ? std::max(redundancy, c) : c;
            any = true;
        }
        out.s[i] = params.lambda * importance[i] - (1.0 - params.lambda) * redundancy;
    }
    return out;
}

/// A single-head decode step small enough for finite-difference gradients.
struct ToyAttention {
    Vector query;
    std::vector<Vector> keys;
    std::vector<Vector> values;
};

/// 0.5 * ||o - target||^2
struct QuadraticLoss {
    Vector target;

    double operator()(const Vector& output) const {
        double acc = 0.0;
        for (std::size_t j = 0; j < output.size(); ++j) {
            const double diff = output[j] - target[j];
            acc += diff * diff;
        }
        return 0.5 * acc;
    }
};

/**
 * ||dL/dk_i|| + ||dL/dv_i|| per position by central differences on every key
 * and value coordinate. `loss` maps the attention output to a scalar.
 */
template <class Loss>
ScoreVector score_gradient_fd(const ToyAttention& toy, Loss&& loss, double step = 1e-5) {
    require(toy.keys.size() <= 64, "score_gradient_fd: at most 64 positions");
    require(toy.query.size() <= 8, "score_gradient_fd: head dimension at most 8");
    ToyAttention work = toy;
    auto eval = [&]() {
        const double l = loss(attention_output(work.query, work.keys, work.values));
        require(std::isfinite(l), "score_gradient_fd: non-finite loss");
        return l;
    };
    eval();
    auto grad_norm = [&](Vector& v) {
        double sq = 0.0;
        for (double& x : v) {
            const double saved = x;
            x = saved + step;
            const double up = eval();
            x = saved - step;
            const double down = eval();
            x = saved;
            const double g = (up - down) / (2.0 * step);
            sq += g * g;
        }
        return std::sqrt(sq);
    };
    ScoreVector out;
    out.s.resize(toy.keys.size());
    for (std::size_t i = 0; i < toy.keys.size(); ++i) {
        out.s[i] = grad_norm(work.keys[i]) + grad_norm(work.values[i]);
    }
    return out;
}

}  // namespace kvtier
