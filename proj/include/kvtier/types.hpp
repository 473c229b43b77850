// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvtier {

using Vector = std::vector<double>;

/// Token position in the KV cache, 0-based (prompt first, then generated tokens).
using Position = std::size_t;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw Error(message);
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline double l2_norm(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

/// Cosine similarity; 0 when either vector has zero norm.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return dot(a, b) / (na * nb);
}

/**
 * Dense per-(layer, head, position) vector storage for keys or values.
 * Layout is layer-major, then head, then position, then the head dimension.
 */
class KvTensor {
public:
    KvTensor() = default;
    KvTensor(std::size_t n_layers, std::size_t n_heads, std::size_t n_positions, std::size_t head_dim)
        : m_layers(n_layers),
          m_heads(n_heads),
          m_positions(n_positions),
          m_dim(head_dim),
          m_data(n_layers * n_heads * n_positions * head_dim, 0.0) {}

    std::size_t n_layers() const { return m_layers; }
    std::size_t n_heads() const { return m_heads; }
    std::size_t n_positions() const { return m_positions; }
    std::size_t head_dim() const { return m_dim; }

    std::span<double> at(std::size_t layer, std::size_t head, Position pos) {
        return {m_data.data() + offset(layer, head, pos), m_dim};
    }
    std::span<const double> at(std::size_t layer, std::size_t head, Position pos) const {
        return {m_data.data() + offset(layer, head, pos), m_dim};
    }

    /// All position vectors of one (layer, head), contiguous.
    std::span<const double> head_block(std::size_t layer, std::size_t head) const {
        return {m_data.data() + offset(layer, head, 0), m_positions * m_dim};
    }

    std::vector<double>& data() { return m_data; }
    const std::vector<double>& data() const { return m_data; }

    bool operator==(const KvTensor&) const = default;

private:
    std::size_t offset(std::size_t layer, std::size_t head, Position pos) const {
        return ((layer * m_heads + head) * m_positions + pos) * m_dim;
    }

    std::size_t m_layers = 0;
    std::size_t m_heads = 0;
    std::size_t m_positions = 0;
    std::size_t m_dim = 0;
    std::vector<double> m_data;
};

}  // namespace kvtier
