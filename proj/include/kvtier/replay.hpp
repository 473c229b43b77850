// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "kvtier/attention.hpp"
#include "kvtier/baselines.hpp"
#include "kvtier/quantize.hpp"
#include "kvtier/rng.hpp"
#include "kvtier/scoring.hpp"
#include "kvtier/tier_manager.hpp"
#include "kvtier/types.hpp"
#include "kvtier/workload.hpp"

namespace kvtier {

enum class PolicyKind { full, hierarchy, streaming, h2o, random };
enum class RankingKind { cumulative, vatp, redundancy, combined, rkv };

inline const char* policy_name(PolicyKind k) {
    switch (k) {
        case PolicyKind::full: return "full";
        case PolicyKind::hierarchy: return "hierarchy";
        case PolicyKind::streaming: return "streaming";
        case PolicyKind::h2o: return "h2o";
        case PolicyKind::random: return "random";
    }
    return "?";
}

inline const char* ranking_name(RankingKind k) {
    switch (k) {
        case RankingKind::cumulative: return "cumulative";
        case RankingKind::vatp: return "vatp";
        case RankingKind::redundancy: return "redundancy";
        case RankingKind::combined: return "combined";
        case RankingKind::rkv: return "rkv";
    }
    return "?";
}

struct PolicySpec {
    PolicyKind kind = PolicyKind::hierarchy;
    HierarchyConfig hierarchy;  // prompt_len is taken from the workload
    RankingKind ranking = RankingKind::cumulative;
    RkvParams rkv;
    PrefetchMode prefetch = PrefetchMode::differential;
    BudgetPolicy budget;  // baselines only; `kind` is overridden by the policy kind

    static PolicySpec full() {
        PolicySpec p;
        p.kind = PolicyKind::full;
        return p;
    }
    static PolicySpec tiered(double beta, double evict_ratio) {
        PolicySpec p;
        p.hierarchy.beta = beta;
        p.hierarchy.evict_ratio = evict_ratio;
        return p;
    }
    static PolicySpec baseline(PolicyKind kind, double budget_ratio, std::uint64_t seed = 0) {
        PolicySpec p;
        p.kind = kind;
        p.budget.budget_ratio = budget_ratio;
        p.budget.rng_seed = seed;
        return p;
    }
};

struct ReplayOptions {
    bool compute_outputs = true;
    bool keep_outputs = false;            // store every step's outputs, [step][layer][head][dim]
    std::uint64_t bytes_per_token = 0;    // census byte accounting
    std::uint64_t compressed_bytes_per_token = 0;
    std::vector<Position> force_evict;    // evicted as soon as they exist
    const RecallTask* recall = nullptr;
    /// Negative control: feed the bound renormalized weights instead of full-cache ones.
    bool bound_uses_renormalized_weights = false;
};

struct StepRecord {
    std::size_t step = 0;
    std::size_t visible = 0;
    double max_error = 0.0;        // max over (layer, head) of ||o_hat - o||
    double max_bound = 0.0;        // doubled-norm eviction bound at the max-error (layer, head)
    bool bound_violated = false;           // some head exceeded the doubled-norm bound
    bool residual_bound_violated = false;  // some head exceeded the residual bound
    std::size_t offload_tokens = 0;
    std::size_t prefetch_tokens = 0;
    std::size_t evicted_tokens = 0;  // newly evicted this step
    bool managed = false;
    TierCensus census;
};

struct ReplayResult {
    std::vector<StepRecord> steps;
    std::vector<double> outputs;
    std::size_t bound_violations = 0;  // steps
    std::size_t residual_bound_violations = 0;
    double max_error = 0.0;
    std::size_t evicted_total = 0;
    std::size_t positions_total = 0;
    std::size_t manage_events = 0;
    std::size_t recall_successes = 0;
    std::size_t recall_trials = 0;

    double recall() const {
        return recall_trials == 0 ? 0.0 : static_cast<double>(recall_successes) / static_cast<double>(recall_trials);
    }
    double evicted_fraction() const {
        return positions_total == 0 ? 0.0 : static_cast<double>(evicted_total) / static_cast<double>(positions_total);
    }
};

namespace detail {

/// Per-step transfer and bookkeeping shared by every policy.
class ReplayEngine {
public:
    ReplayEngine(const Workload& w, const PolicySpec& spec, const ReplayOptions& options)
        : m_w(w), m_spec(spec), m_opt(options), m_shape(w.shape()), m_values(w.values) {
        m_shape.validate();
        require(w.keys.n_positions() == m_shape.total_positions() && w.values.n_positions() == m_shape.total_positions(),
                "replay: key/value tensors do not match the trace shape");
        m_cfg = spec.hierarchy;
        m_cfg.prompt_len = m_shape.prompt_len;
        if (spec.kind == PolicyKind::hierarchy) {
            m_cfg.validate();
        }
        m_budget = spec.budget;
        if (spec.kind == PolicyKind::streaming) m_budget.kind = BaselineKind::streaming;
        if (spec.kind == PolicyKind::h2o) m_budget.kind = BaselineKind::h2o;
        if (spec.kind == PolicyKind::random) m_budget.kind = BaselineKind::random;
        if (spec.kind == PolicyKind::hierarchy && spec.ranking != RankingKind::cumulative) {
            m_step_options.ranking = [this](const ScoreVector& cum, const TierState& st) { return rank(cum, st); };
            if (spec.ranking != RankingKind::vatp) {
                m_rep_keys = representative_keys(w.keys, m_shape.total_positions());
            }
            m_norms = mean_value_norms(w.values);
        }
        m_step_options.prefetch = spec.prefetch;
        m_step_options.bytes_per_token = options.bytes_per_token;
        m_step_options.compressed_bytes_per_token = options.compressed_bytes_per_token;
        if (options.recall) {
            m_recall_at.assign(m_shape.chain_len, -1);
            for (const auto& q : options.recall->schedule) {
                require(q.step < m_shape.chain_len && q.needle < options.recall->needles.size(),
                        "replay: recall schedule out of range");
                m_recall_at[q.step] = static_cast<std::int64_t>(q.needle);
            }
        }
        m_quantized.assign(m_shape.total_positions(), 0);
    }

    ReplayResult run() {
        ReplayResult result;
        const std::size_t lh = m_shape.n_layers * m_shape.n_heads;
        if (m_opt.keep_outputs) {
            result.outputs.reserve(m_shape.chain_len * lh * m_shape.head_dim);
        }
        for (std::size_t t = 0; t < m_shape.chain_len; ++t) {
            StepRecord rec;
            rec.step = t;
            const std::size_t n = m_shape.positions_at(t);
            while (m_state.size() < n) {
                m_state.append_position();
            }
            for (Position p : m_opt.force_evict) {
                if (p < n && m_state.tier_of[p] != Tier::evicted) {
                    evict(p);
                    ++rec.evicted_tokens;
                }
            }
            if (is_baseline()) {
                rec.evicted_tokens += apply_budget(t, n);
            }

            const auto visible = m_state.visible();
            rec.visible = visible.size();
            const StepAttention attn = observe(t, visible, rec, result);

            if (m_spec.kind == PolicyKind::hierarchy) {
                StepOutcome out = step(std::move(m_state), std::move(m_scores), attn, m_cfg, m_step_options);
                m_state = std::move(out.state);
                m_scores = std::move(out.scores);
                rec.prefetch_tokens = out.prefetch_set.size();
                rec.offload_tokens = out.offload_set.size();
                rec.evicted_tokens += out.evicted_set.size();
                rec.managed = out.managed;
                rec.census = out.census;
                result.manage_events += out.managed ? 1 : 0;
                quantize_compressed();
            } else {
                accumulate(m_scores, attn);
                rec.census = take_census(m_state, m_opt.bytes_per_token, m_opt.compressed_bytes_per_token);
                rec.census.step = static_cast<std::int64_t>(t);
                ++m_state.step;
            }
            if (m_spec.ranking == RankingKind::rkv) {
                m_recent.push_back(attn);
                while (m_recent.size() > m_spec.rkv.alpha_window) {
                    m_recent.pop_front();
                }
            }
            result.evicted_total += rec.evicted_tokens;
            result.bound_violations += rec.bound_violated ? 1 : 0;
            result.residual_bound_violations += rec.residual_bound_violated ? 1 : 0;
            result.max_error = std::max(result.max_error, rec.max_error);
            result.steps.push_back(rec);
        }
        result.positions_total = m_state.size();
        return result;
    }

private:
    bool is_baseline() const {
        return m_spec.kind == PolicyKind::streaming || m_spec.kind == PolicyKind::h2o ||
               m_spec.kind == PolicyKind::random;
    }

    void evict(Position p) {
        m_state.tier_of[p] = Tier::evicted;
        m_state.cpu_store.erase(p);
        m_state.staging.erase(p);
    }

    std::size_t apply_budget(std::size_t t, std::size_t n) {
        const auto live = m_state.visible();
        const std::size_t budget = m_budget.budget_for(n);
        if (live.size() <= budget) {
            return 0;
        }
        std::vector<Position> keep;
        switch (m_spec.kind) {
            case PolicyKind::streaming:
                keep = streaming_keep(live, budget, m_budget.sink_size);
                break;
            case PolicyKind::h2o: {
                ScoreVector s = m_scores;
                s.s.resize(n, 0.0);
                keep = h2o_keep(s, live, budget, m_budget.window_size);
                break;
            }
            default:
                keep = random_keep(live, budget, mix_seed(m_budget.rng_seed, t), m_budget.sink_size,
                                   m_budget.window_size);
                break;
        }
        std::size_t removed = 0;
        std::size_t k = 0;
        for (Position p : live) {
            if (k < keep.size() && keep[k] == p) {
                ++k;
            } else {
                evict(p);
                ++removed;
            }
        }
        return removed;
    }

    /// Attention actually paid at step t (renormalized over `visible`), plus error accounting.
    StepAttention observe(std::size_t t, const std::vector<Position>& visible, StepRecord& rec, ReplayResult& result) {
        const std::size_t n = m_shape.positions_at(t);
        const std::size_t d = m_shape.head_dim;
        StepAttention attn(m_shape.n_layers, m_shape.n_heads, n);
        std::vector<Position> evicted;
        for (Position p = 0; p < n; ++p) {
            if (m_state.tier_of[p] == Tier::evicted) {
                evicted.push_back(p);
            }
        }
        std::vector<Position> all(n);
        for (Position p = 0; p < n; ++p) {
            all[p] = p;
        }
        const bool lossless = !std::any_of(m_quantized.begin(), m_quantized.begin() + static_cast<std::ptrdiff_t>(n),
                                           [](char c) { return c != 0; });
        const std::int64_t needle = m_recall_at.empty() ? -1 : m_recall_at[t];
        bool retrieved = true;

        for (std::size_t l = 0; l < m_shape.n_layers; ++l) {
            const bool nan_layer = m_w.trace.is_nan_layer(t, l);
            attn.nan_layer[l] = nan_layer ? 1 : 0;
            for (std::size_t h = 0; h < m_shape.n_heads; ++h) {
                const auto full = m_w.trace.row(t, l, h);
                auto seen = attn.row(l, h);
                if (nan_layer) {
                    std::fill(seen.begin(), seen.end(), full[0]);
                    if (m_opt.keep_outputs) {
                        result.outputs.insert(result.outputs.end(), d, full[0]);
                    }
                    continue;
                }
                double z = 0.0;
                for (Position p : visible) {
                    z += full[p];
                }
                require(z > 0.0, "replay: visible set has zero attention mass at step " + std::to_string(t));
                for (Position p : visible) {
                    seen[p] = full[p] / z;
                }
                if (!m_opt.compute_outputs && needle < 0) {
                    continue;
                }
                const auto block = m_values.head_block(l, h).first(n * d);
                const Vector out = renormalized_output(full, block, d, visible);
                if (m_opt.keep_outputs) {
                    result.outputs.insert(result.outputs.end(), out.begin(), out.end());
                }
                if (m_opt.compute_outputs) {
                    const Vector exact = renormalized_output(full, m_w.values.head_block(l, h).first(n * d), d, all);
                    const double err = l2_distance(out, exact);
                    double bound = 0.0;
                    double residual = 0.0;
                    for (Position p : evicted) {
                        const auto v = m_w.values.at(l, h, p);
                        bound += (m_opt.bound_uses_renormalized_weights ? seen[p] : full[p]) * l2_norm(v);
                        residual += full[p] * l2_distance(out, v);
                    }
                    bound *= 2.0;
                    if (err > rec.max_error) {
                        rec.max_error = err;
                        rec.max_bound = bound;
                    }
                    // Quantized values add error the eviction bound does not cover.
                    if (lossless && err > bound * (1.0 + 1e-12) + 1e-14) {
                        rec.bound_violated = true;
                    }
                    if (lossless && err > residual * (1.0 + 1e-12) + 1e-14) {
                        rec.residual_bound_violated = true;
                    }
                }
                if (needle >= 0) {
                    const Position p = m_opt.recall->needles[static_cast<std::size_t>(needle)];
                    const auto payload = m_w.values.at(l, h, p);
                    if (l2_distance(out, payload) > m_opt.recall->tolerance * l2_norm(payload)) {
                        retrieved = false;
                    }
                }
            }
        }
        if (needle >= 0) {
            ++result.recall_trials;
            result.recall_successes += retrieved ? 1 : 0;
        }
        return attn;
    }

    /// Host-resident int8 storage: once a position lands in T2 its values stay lossy.
    void quantize_compressed() {
        if (!m_cfg.t2_enabled) {
            return;
        }
        for (Position p = 0; p < m_state.size(); ++p) {
            if (m_state.tier_of[p] != Tier::compressed || m_quantized[p]) {
                continue;
            }
            for (std::size_t l = 0; l < m_shape.n_layers; ++l) {
                for (std::size_t h = 0; h < m_shape.n_heads; ++h) {
                    auto v = m_values.at(l, h, p);
                    const Vector back = dequantize_int8(quantize_int8(v));
                    std::copy(back.begin(), back.end(), v.begin());
                }
            }
            m_quantized[p] = 1;
        }
    }

    ScoreVector rank(const ScoreVector& cum, const TierState& st) const {
        const std::size_t n = cum.size();
        const std::span<const double> norms(m_norms.data(), n);
        const std::span<const Vector> keys(m_rep_keys.data(), std::min(n, m_rep_keys.size()));
        switch (m_spec.ranking) {
            case RankingKind::vatp: return score_vatp(cum, norms);
            case RankingKind::redundancy: return score_redundancy(keys, cum);
            case RankingKind::combined: return score_combined(keys, cum, norms);
            case RankingKind::rkv: {
                const auto prot = protected_set(n - std::min(m_cfg.prompt_len, n), m_cfg);
                std::vector<char> is_prot(n, 0);
                for (Position p : prot) {
                    is_prot[p] = 1;
                }
                std::vector<Position> candidates;
                for (Position p = 0; p < n; ++p) {
                    if (!is_prot[p] && st.tier_of[p] != Tier::evicted) {
                        candidates.push_back(p);
                    }
                }
                const std::vector<StepAttention> recent(m_recent.begin(), m_recent.end());
                return score_rkv(recent, keys, m_spec.rkv, candidates);
            }
            case RankingKind::cumulative: break;
        }
        return cum;
    }

    const Workload& m_w;
    PolicySpec m_spec;
    ReplayOptions m_opt;
    TraceShape m_shape;
    HierarchyConfig m_cfg;
    BudgetPolicy m_budget;
    StepOptions m_step_options;
    KvTensor m_values;  // working copy; T2 members are replaced by their int8 reconstruction
    std::vector<char> m_quantized;
    TierState m_state;
    ScoreVector m_scores;
    std::vector<Vector> m_rep_keys;
    std::vector<double> m_norms;
    std::deque<StepAttention> m_recent;
    std::vector<std::int64_t> m_recall_at;
};

}  // namespace detail

/**
 * Replays a workload under one cache policy. Every step attends over the
 * positions the policy still holds (all non-evicted tiers), using the
 * recorded full-cache weights renormalized over that set.
 */
inline ReplayResult replay(const Workload& workload, const PolicySpec& spec, const ReplayOptions& options = {}) {
    detail::ReplayEngine engine(workload, spec, options);
    return engine.run();
}

/// Convenience wrapper for the recall task.
inline ReplayResult replay_recall(const RecallWorkload& rw, const PolicySpec& spec, ReplayOptions options = {}) {
    options.recall = &rw.task;
    return replay(rw.workload, spec, options);
}

}  // namespace kvtier
