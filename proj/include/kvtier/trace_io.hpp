// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kvtier/workload.hpp"

namespace kvtier {

// Binary trace layout, all integers and floats little-endian:
//
//   offset 0   magic "KVTRACE\0"
//   offset 8   u64 version (1)
//   offset 16  u64 L, H, d, P, T
//   offset 56  f64 weight rows: step-major, then layer, then head; step t rows
//              have P + t + 1 entries; NaN layers are rows of NaN
//   ...        f64 keys   [L][H][P+T][d]
//   ...        f64 values [L][H][P+T][d]
//
// The text variant carries the same data one row per line:
//
//   kvtrace-text 1
//   shape L H d P T
//   w <step> <layer> <head> <P+step+1 weights>
//   k <layer> <head> <pos> <d floats>
//   v <layer> <head> <pos> <d floats>
//
// Floats in text use the shortest round-trip representation, so both forms
// are lossless.

inline constexpr std::array<char, 8> trace_magic{'K', 'V', 'T', 'R', 'A', 'C', 'E', '\0'};
inline constexpr std::uint64_t trace_version = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : m_bytes(bytes) {}

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(m_bytes[m_pos + i])) << (8 * i);
        }
        m_pos += 8;
        return v;
    }

    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

    void need(std::size_t n, const char* what) const {
        if (m_bytes.size() - m_pos < n) {
            throw Error("truncated trace file: " + std::string(what) + " needs " + std::to_string(n) +
                        " bytes at byte offset " + std::to_string(m_pos) + ", file has " +
                        std::to_string(m_bytes.size()) + " bytes");
        }
    }

    std::string_view take(std::size_t n, const char* what) {
        need(n, what);
        auto s = m_bytes.substr(m_pos, n);
        m_pos += n;
        return s;
    }

    std::size_t offset() const { return m_pos; }
    std::size_t remaining() const { return m_bytes.size() - m_pos; }

private:
    std::string_view m_bytes;
    std::size_t m_pos = 0;
};

inline std::string wide_to_string(unsigned __int128 v) {
    std::string digits;
    do {
        digits.insert(digits.begin(), static_cast<char>('0' + static_cast<int>(v % 10)));
        v /= 10;
    } while (v != 0);
    return digits;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open trace file " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot write trace file " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), "failed writing trace file " + path);
}

inline void append_double(std::string& out, double v) {
    std::array<char, 32> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    out.append(buf.data(), res.ptr);
}

/// Guards against absurd headers before allocating.
inline void check_shape_header(const TraceShape& s) {
    constexpr std::uint64_t limit = 1ULL << 32;
    require(s.n_layers > 0 && s.n_heads > 0 && s.head_dim > 0 && s.chain_len > 0,
            "malformed trace header: L, H, d, T must be positive");
    require(s.n_layers < limit && s.n_heads < limit && s.head_dim < limit && s.prompt_len < limit &&
                s.chain_len < limit,
            "malformed trace header: implausible dimensions");
}

inline void validate_workload(const Workload& w, double tolerance) {
    try {
        w.trace.validate(tolerance);
    } catch (const Error& e) {
        throw Error(std::string("trace parse error: ") + e.what());
    }
}

}  // namespace detail

inline std::string encode_trace(const Workload& w) {
    const TraceShape& s = w.shape();
    std::string out(trace_magic.begin(), trace_magic.end());
    detail::put_u64(out, trace_version);
    for (std::uint64_t v : {s.n_layers, s.n_heads, s.head_dim, s.prompt_len, s.chain_len}) {
        detail::put_u64(out, v);
    }
    out.reserve(out.size() + 8 * (w.trace.data().size() + w.keys.data().size() + w.values.data().size()));
    for (double x : w.trace.data()) {
        detail::put_f64(out, x);
    }
    for (double x : w.keys.data()) {
        detail::put_f64(out, x);
    }
    for (double x : w.values.data()) {
        detail::put_f64(out, x);
    }
    return out;
}

inline Workload decode_trace(std::string_view bytes, double tolerance = 1e-6) {
    detail::ByteReader in(bytes);
    const auto magic = in.take(trace_magic.size(), "magic");
    if (std::memcmp(magic.data(), trace_magic.data(), trace_magic.size()) != 0) {
        throw Error("malformed trace header: bad magic at byte offset 0");
    }
    const std::uint64_t version = in.u64("version");
    require(version == trace_version,
            "malformed trace header: unsupported version " + std::to_string(version) + " at byte offset 8");
    TraceShape shape;
    shape.n_layers = in.u64("n_layers");
    shape.n_heads = in.u64("n_heads");
    shape.head_dim = in.u64("head_dim");
    shape.prompt_len = in.u64("prompt_len");
    shape.chain_len = in.u64("chain_len");
    detail::check_shape_header(shape);

    // Sizes in 128-bit so a hostile header cannot wrap around before the length check.
    using wide = unsigned __int128;
    const wide lh = static_cast<wide>(shape.n_layers) * shape.n_heads;
    const wide t = shape.chain_len;
    const wide wide_weights = lh * (t * (shape.prompt_len + 1) + t * (t - 1) / 2);
    const wide wide_tensor = lh * (static_cast<wide>(shape.prompt_len) + t) * shape.head_dim;
    if (8 * (wide_weights + 2 * wide_tensor) > in.remaining()) {
        // Name the first section that does not fit, at the offset where it starts.
        const wide sections[3] = {8 * wide_weights, 8 * wide_tensor, 8 * wide_tensor};
        const char* names[3] = {"attention weights", "keys", "values"};
        wide start = in.offset();
        for (int i = 0; i < 3; ++i) {
            if (start + sections[i] > bytes.size()) {
                const auto avail = bytes.size() - std::min<wide>(start, bytes.size());
                throw Error("truncated trace file: " + std::string(names[i]) + " start at byte offset " +
                            detail::wide_to_string(start) + " and need " + detail::wide_to_string(sections[i]) +
                            " bytes, " + detail::wide_to_string(avail) + " remain");
            }
            start += sections[i];
        }
    }
    const auto weights = static_cast<std::size_t>(wide_weights);
    const auto tensor = static_cast<std::size_t>(wide_tensor);

    Workload w;
    in.need(8 * weights, "attention weights");
    w.trace = AttentionTrace(shape);
    for (double& x : w.trace.data()) {
        x = in.f64("attention weights");
    }
    in.need(8 * tensor, "keys");
    w.keys = KvTensor(shape.n_layers, shape.n_heads, shape.total_positions(), shape.head_dim);
    for (double& x : w.keys.data()) {
        x = in.f64("keys");
    }
    in.need(8 * tensor, "values");
    w.values = KvTensor(shape.n_layers, shape.n_heads, shape.total_positions(), shape.head_dim);
    for (double& x : w.values.data()) {
        x = in.f64("values");
    }
    require(in.remaining() == 0, "trailing bytes after values at byte offset " + std::to_string(in.offset()));
    detail::validate_workload(w, tolerance);
    return w;
}

inline void save_trace(const Workload& w, const std::string& path) { detail::write_file(path, encode_trace(w)); }

inline Workload load_trace(const std::string& path, double tolerance = 1e-6) {
    return decode_trace(detail::read_file(path), tolerance);
}

inline std::string encode_trace_text(const Workload& w) {
    const TraceShape& s = w.shape();
    std::string out = "kvtrace-text 1\n";
    out += "shape " + std::to_string(s.n_layers) + " " + std::to_string(s.n_heads) + " " +
           std::to_string(s.head_dim) + " " + std::to_string(s.prompt_len) + " " + std::to_string(s.chain_len) + "\n";
    auto emit = [&](std::span<const double> xs) {
        for (double x : xs) {
            out += ' ';
            detail::append_double(out, x);
        }
        out += '\n';
    };
    for (std::size_t t = 0; t < s.chain_len; ++t) {
        for (std::size_t l = 0; l < s.n_layers; ++l) {
            for (std::size_t h = 0; h < s.n_heads; ++h) {
                out += "w " + std::to_string(t) + " " + std::to_string(l) + " " + std::to_string(h);
                emit(w.trace.row(t, l, h));
            }
        }
    }
    for (const auto& [tag, tensor] : {std::pair{'k', &w.keys}, std::pair{'v', &w.values}}) {
        for (std::size_t l = 0; l < s.n_layers; ++l) {
            for (std::size_t h = 0; h < s.n_heads; ++h) {
                for (Position p = 0; p < s.total_positions(); ++p) {
                    out += std::string(1, tag) + " " + std::to_string(l) + " " + std::to_string(h) + " " +
                           std::to_string(p);
                    emit(tensor->at(l, h, p));
                }
            }
        }
    }
    return out;
}

inline Workload decode_trace_text(std::string_view text, double tolerance = 1e-6) {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    auto fail = [&](const std::string& msg) -> Error {
        return Error("trace parse error at line " + std::to_string(line_no) + ": " + msg);
    };
    auto next_line = [&](std::string_view& line) {
        while (pos < text.size()) {
            const std::size_t end = std::min(text.find('\n', pos), text.size());
            line = text.substr(pos, end - pos);
            pos = end + 1;
            ++line_no;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string_view::npos || line[first] == '#') {
                continue;
            }
            return true;
        }
        return false;
    };
    auto tokens = [](std::string_view line) {
        std::vector<std::string_view> out;
        std::size_t i = 0;
        while (i < line.size()) {
            while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) {
                ++i;
            }
            const std::size_t start = i;
            while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') {
                ++i;
            }
            if (i > start) {
                out.push_back(line.substr(start, i - start));
            }
        }
        return out;
    };
    auto to_u64 = [&](std::string_view tok) {
        std::uint64_t v = 0;
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
            throw fail("expected integer, got '" + std::string(tok) + "'");
        }
        return v;
    };
    auto to_f64 = [&](std::string_view tok) {
        double v = 0;
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
            throw fail("expected float, got '" + std::string(tok) + "'");
        }
        return v;
    };

    std::string_view line;
    if (!next_line(line) || tokens(line) != std::vector<std::string_view>{"kvtrace-text", "1"}) {
        throw fail("missing 'kvtrace-text 1' header");
    }
    if (!next_line(line)) {
        throw fail("missing shape line");
    }
    auto head = tokens(line);
    if (head.size() != 6 || head[0] != "shape") {
        throw fail("malformed shape line");
    }
    TraceShape shape{to_u64(head[1]), to_u64(head[2]), to_u64(head[3]), to_u64(head[4]), to_u64(head[5])};
    detail::check_shape_header(shape);
    {
        // Every number takes at least two characters, which bounds any honest shape.
        using wide = unsigned __int128;
        const wide lh = static_cast<wide>(shape.n_layers) * shape.n_heads;
        const wide t = shape.chain_len;
        const wide numbers = lh * (t * (shape.prompt_len + 1) + t * (t - 1) / 2) +
                             2 * lh * (static_cast<wide>(shape.prompt_len) + t) * shape.head_dim;
        if (2 * numbers > text.size()) {
            throw fail("shape mismatch: header declares more values than the file can hold");
        }
    }

    Workload w;
    w.trace = AttentionTrace(shape);
    w.keys = KvTensor(shape.n_layers, shape.n_heads, shape.total_positions(), shape.head_dim);
    w.values = w.keys;
    const std::size_t lh = shape.n_layers * shape.n_heads;
    std::vector<char> seen_rows(shape.chain_len * lh, 0);
    std::vector<char> seen_keys(lh * shape.total_positions(), 0);
    std::vector<char> seen_values(seen_keys.size(), 0);

    while (next_line(line)) {
        const auto tok = tokens(line);
        if (tok.size() < 4 || tok[0].size() != 1) {
            throw fail("malformed row");
        }
        const std::uint64_t a = to_u64(tok[1]);
        const std::uint64_t b = to_u64(tok[2]);
        const std::uint64_t c = to_u64(tok[3]);
        std::span<double> dest;
        char* seen = nullptr;
        if (tok[0] == "w") {
            if (a >= shape.chain_len || b >= shape.n_layers || c >= shape.n_heads) {
                throw fail("weight row index out of range");
            }
            dest = w.trace.row(a, b, c);
            seen = &seen_rows[a * lh + b * shape.n_heads + c];
        } else if (tok[0] == "k" || tok[0] == "v") {
            if (a >= shape.n_layers || b >= shape.n_heads || c >= shape.total_positions()) {
                throw fail("tensor row index out of range");
            }
            auto& tensor = tok[0] == "k" ? w.keys : w.values;
            dest = tensor.at(a, b, c);
            seen = &(tok[0] == "k" ? seen_keys : seen_values)[(a * shape.n_heads + b) * shape.total_positions() + c];
        } else {
            throw fail("unknown row tag '" + std::string(tok[0]) + "'");
        }
        if (tok.size() - 4 != dest.size()) {
            throw fail("shape mismatch: expected " + std::to_string(dest.size()) + " values, got " +
                       std::to_string(tok.size() - 4));
        }
        if (*seen) {
            throw fail("duplicate row");
        }
        *seen = 1;
        for (std::size_t i = 0; i < dest.size(); ++i) {
            dest[i] = to_f64(tok[4 + i]);
        }
    }
    auto all = [](const std::vector<char>& v) { return std::find(v.begin(), v.end(), 0) == v.end(); };
    if (!all(seen_rows) || !all(seen_keys) || !all(seen_values)) {
        throw fail("missing rows (shape mismatch)");
    }
    detail::validate_workload(w, tolerance);
    return w;
}

inline void save_trace_text(const Workload& w, const std::string& path) {
    detail::write_file(path, encode_trace_text(w));
}

inline Workload load_trace_text(const std::string& path, double tolerance = 1e-6) {
    return decode_trace_text(detail::read_file(path), tolerance);
}

/// Dispatches on content: binary magic or the text header.
inline Workload load_any_trace(const std::string& path, double tolerance = 1e-6) {
    const std::string bytes = detail::read_file(path);
    if (bytes.size() >= trace_magic.size() &&
        std::memcmp(bytes.data(), trace_magic.data(), trace_magic.size()) == 0) {
        return decode_trace(bytes, tolerance);
    }
    return decode_trace_text(bytes, tolerance);
}

}  // namespace kvtier
