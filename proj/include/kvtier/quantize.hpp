// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "kvtier/types.hpp"

namespace kvtier {

/// Symmetric per-vector int8 storage used by the compressed tier.
struct QuantizedVector {
    std::vector<std::int8_t> codes;
    double scale = 1.0;
};

inline QuantizedVector quantize_int8(std::span<const double> v) {
    double absmax = 0.0;
    for (double x : v) {
        require(std::isfinite(x), "quantize_int8: non-finite element");
        absmax = std::max(absmax, std::abs(x));
    }
    QuantizedVector q;
    q.scale = absmax > 0.0 ? absmax / 127.0 : 1.0;
    q.codes.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double code = std::clamp(std::round(v[i] / q.scale), -127.0, 127.0);
        q.codes[i] = static_cast<std::int8_t>(code);
    }
    return q;
}

inline Vector dequantize_int8(const QuantizedVector& q) {
    Vector out(q.codes.size());
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
        out[i] = static_cast<double>(q.codes[i]) * q.scale;
    }
    return out;
}

}  // namespace kvtier
