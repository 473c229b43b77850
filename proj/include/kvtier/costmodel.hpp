// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvtier/types.hpp"

namespace kvtier {

struct ModelShape {
    std::size_t n_layers = 28;
    std::size_t n_kv_heads = 28;
    std::size_t head_dim = 128;
    std::size_t bytes_per_element = 2;

    void validate() const {
        require(n_layers > 0 && n_kv_heads > 0 && head_dim > 0 && bytes_per_element > 0,
                "model shape: all fields must be positive");
    }
};

/// Key plus value bytes of one token across all layers and KV heads.
inline std::uint64_t per_token_kv_bytes(const ModelShape& shape) {
    shape.validate();
    return 2ull * shape.n_layers * shape.n_kv_heads * shape.head_dim * shape.bytes_per_element;
}

enum class Direction { gpu_to_cpu, cpu_to_gpu };

inline const char* direction_name(Direction d) { return d == Direction::gpu_to_cpu ? "gpu_to_cpu" : "cpu_to_gpu"; }

struct LinkParams {
    double bandwidth = 22e9;     // bytes/s once saturated
    double fixed_latency = 0.0;  // s per transfer
};

/// A (tokens, seconds) measurement used for calibration.
struct LatencyPoint {
    double tokens = 0;
    double seconds = 0;
};

/**
 * Straight-line fit through two measurements above saturation: the slope
 * gives the per-token time (hence bandwidth), the intercept the fixed latency.
 */
inline LinkParams calibrate_link(LatencyPoint a, LatencyPoint b, std::uint64_t bytes_per_token) {
    require(a.tokens != b.tokens, "calibration: points need distinct token counts");
    const double slope = (b.seconds - a.seconds) / (b.tokens - a.tokens);
    require(slope > 0.0, "calibration: latency must grow with token count");
    LinkParams link;
    link.bandwidth = static_cast<double>(bytes_per_token) / slope;
    link.fixed_latency = a.seconds - a.tokens * slope;
    require(link.fixed_latency >= 0.0, "calibration: points imply a negative fixed latency");
    return link;
}

struct TransferModelParams {
    LinkParams gpu_to_cpu;
    LinkParams cpu_to_gpu;
    double saturation_tokens = 64;

    const LinkParams& link(Direction d) const { return d == Direction::gpu_to_cpu ? gpu_to_cpu : cpu_to_gpu; }

    void validate() const {
        for (const auto* l : {&gpu_to_cpu, &cpu_to_gpu}) {
            require(l->bandwidth > 0.0, "transfer model: bandwidth must be positive");
            require(l->fixed_latency >= 0.0, "transfer model: fixed latency must be >= 0");
        }
        require(saturation_tokens >= 0.0, "transfer model: saturation_tokens must be >= 0");
    }
};

struct CalibrationPoints {
    LatencyPoint gpu_to_cpu_small{64, 1.1e-3};
    LatencyPoint gpu_to_cpu_large{600, 8.6e-3};
    LatencyPoint cpu_to_gpu_small{64, 1.5e-3};
    LatencyPoint cpu_to_gpu_large{600, 13.1e-3};
};

inline TransferModelParams calibrate(const CalibrationPoints& pts, const ModelShape& shape, double saturation_tokens = 64) {
    const auto bpt = per_token_kv_bytes(shape);
    TransferModelParams p;
    p.gpu_to_cpu = calibrate_link(pts.gpu_to_cpu_small, pts.gpu_to_cpu_large, bpt);
    p.cpu_to_gpu = calibrate_link(pts.cpu_to_gpu_small, pts.cpu_to_gpu_large, bpt);
    p.saturation_tokens = saturation_tokens;
    return p;
}

/// The measured 7B configuration the quoted latencies come from.
inline ModelShape reference_shape() { return ModelShape{}; }

inline TransferModelParams default_transfer_params() { return calibrate(CalibrationPoints{}, reference_shape()); }

/**
 * Seconds to move `tokens` tokens. Effective bandwidth rises linearly with
 * the transfer size up to saturation_tokens and is flat beyond, so any
 * non-empty transfer below saturation costs as much as one at saturation.
 */
inline double transfer_latency(double tokens, const ModelShape& shape, Direction dir, const TransferModelParams& params) {
    require(tokens >= 0.0, "transfer_latency: negative token count");
    params.validate();
    const LinkParams& link = params.link(dir);
    if (tokens == 0.0) {
        return link.fixed_latency;
    }
    const double billed = std::max(tokens, params.saturation_tokens);
    return link.fixed_latency + billed * static_cast<double>(per_token_kv_bytes(shape)) / link.bandwidth;
}

struct TransferEvent {
    std::size_t step = 0;
    std::size_t offload_tokens = 0;   // GPU -> CPU
    std::size_t prefetch_tokens = 0;  // CPU -> GPU
};

struct TransferSchedule {
    std::size_t steps = 0;  // decode steps covered, transfers or not
    std::vector<TransferEvent> events;
};

struct OverheadBreakdown {
    double transfer_seconds = 0.0;
    double compute_seconds = 0.0;
    std::size_t transfers = 0;

    double fraction() const {
        const double total = transfer_seconds + compute_seconds;
        require(total > 0.0, "overhead_fraction: zero total time");
        return transfer_seconds / total;
    }
};

/// Transfer time against compute time; empty transfers cost nothing.
inline OverheadBreakdown overhead_breakdown(const TransferSchedule& schedule,
                                            double per_step_compute,
                                            const ModelShape& shape,
                                            const TransferModelParams& params) {
    require(per_step_compute >= 0.0, "overhead_fraction: negative compute time");
    OverheadBreakdown b;
    b.compute_seconds = per_step_compute * static_cast<double>(schedule.steps);
    for (const auto& e : schedule.events) {
        if (e.offload_tokens > 0) {
            b.transfer_seconds += transfer_latency(static_cast<double>(e.offload_tokens), shape, Direction::gpu_to_cpu, params);
            ++b.transfers;
        }
        if (e.prefetch_tokens > 0) {
            b.transfer_seconds += transfer_latency(static_cast<double>(e.prefetch_tokens), shape, Direction::cpu_to_gpu, params);
            ++b.transfers;
        }
    }
    return b;
}

inline double overhead_fraction(const TransferSchedule& schedule,
                                double per_step_compute,
                                const ModelShape& shape,
                                const TransferModelParams& params) {
    return overhead_breakdown(schedule, per_step_compute, shape, params).fraction();
}

inline constexpr double gib = 1024.0 * 1024.0 * 1024.0;

struct DeploymentScenario {
    std::string name;
    ModelShape shape;
    std::size_t batch = 1;
    std::size_t seq_len = 2048;
    double weight_bytes = 0.0;
    double offload_fraction = 0.6;

    void validate() const {
        shape.validate();
        require(weight_bytes >= 0.0, "scenario: weight bytes must be >= 0");
        require(offload_fraction >= 0.0 && offload_fraction <= 1.0, "scenario: offload fraction must be in [0,1]");
    }
};

struct ScalingProjection {
    double kv_bytes = 0.0;
    double kv_fraction = 0.0;
    double savings_bytes = 0.0;
};

inline ScalingProjection scaling_projection(const DeploymentScenario& s) {
    s.validate();
    ScalingProjection p;
    p.kv_bytes = static_cast<double>(per_token_kv_bytes(s.shape)) * static_cast<double>(s.seq_len) *
                 static_cast<double>(s.batch);
    const double total = p.kv_bytes + s.weight_bytes;
    p.kv_fraction = total > 0.0 ? p.kv_bytes / total : 0.0;
    p.savings_bytes = s.offload_fraction * p.kv_bytes;
    return p;
}

}  // namespace kvtier
