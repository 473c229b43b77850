// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "kvtier/types.hpp"

namespace kvtier {

// Reader for the TOML subset used by experiment files: [table] and
// [[array-of-tables]] headers, bare keys, strings, integers, floats,
// booleans, and arrays of those (arrays may span lines). Dotted keys,
// inline tables and dates are rejected.

struct ConfigValue;
using ConfigArray = std::vector<ConfigValue>;

struct ConfigValue {
    std::variant<bool, std::int64_t, double, std::string, ConfigArray> v;
};

class ConfigTable {
public:
    bool contains(const std::string& key) const { return m_values.contains(key); }
    const std::map<std::string, ConfigValue>& values() const { return m_values; }
    std::string name;  // header it came from, for messages

    void set(const std::string& key, ConfigValue value, std::size_t line) {
        require(!m_values.contains(key), "config line " + std::to_string(line) + ": duplicate key '" + key + "'");
        m_values.emplace(key, std::move(value));
    }

    double get_double(const std::string& key, double fallback) const {
        const auto* v = find(key);
        return v ? as_double(*v, key) : fallback;
    }
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
        const auto* v = find(key);
        return v ? as_int(*v, key) : fallback;
    }
    std::size_t get_size(const std::string& key, std::size_t fallback) const {
        const auto i = get_int(key, static_cast<std::int64_t>(fallback));
        require(i >= 0, where(key) + " must be nonnegative");
        return static_cast<std::size_t>(i);
    }
    bool get_bool(const std::string& key, bool fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        const auto* b = std::get_if<bool>(&v->v);
        require(b != nullptr, where(key) + " must be a boolean");
        return *b;
    }
    std::string get_string(const std::string& key, const std::string& fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        const auto* s = std::get_if<std::string>(&v->v);
        require(s != nullptr, where(key) + " must be a string");
        return *s;
    }
    std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        std::vector<double> out;
        for (const auto& e : array(*v, key)) out.push_back(as_double(e, key));
        return out;
    }
    std::vector<std::int64_t> get_ints(const std::string& key, std::vector<std::int64_t> fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        std::vector<std::int64_t> out;
        for (const auto& e : array(*v, key)) out.push_back(as_int(e, key));
        return out;
    }
    std::vector<std::string> get_strings(const std::string& key, std::vector<std::string> fallback) const {
        const auto* v = find(key);
        if (!v) return fallback;
        std::vector<std::string> out;
        for (const auto& e : array(*v, key)) {
            const auto* s = std::get_if<std::string>(&e.v);
            require(s != nullptr, where(key) + " must hold strings");
            out.push_back(*s);
        }
        return out;
    }

private:
    const ConfigValue* find(const std::string& key) const {
        const auto it = m_values.find(key);
        return it == m_values.end() ? nullptr : &it->second;
    }
    std::string where(const std::string& key) const { return "config [" + name + "] " + key; }
    double as_double(const ConfigValue& v, const std::string& key) const {
        if (const auto* d = std::get_if<double>(&v.v)) return *d;
        if (const auto* i = std::get_if<std::int64_t>(&v.v)) return static_cast<double>(*i);
        throw Error(where(key) + " must be a number");
    }
    std::int64_t as_int(const ConfigValue& v, const std::string& key) const {
        const auto* i = std::get_if<std::int64_t>(&v.v);
        require(i != nullptr, where(key) + " must be an integer");
        return *i;
    }
    const ConfigArray& array(const ConfigValue& v, const std::string& key) const {
        const auto* a = std::get_if<ConfigArray>(&v.v);
        require(a != nullptr, where(key) + " must be an array");
        return *a;
    }

    std::map<std::string, ConfigValue> m_values;
};

struct ConfigDocument {
    std::map<std::string, ConfigTable> tables;                    // "" is the root table
    std::map<std::string, std::vector<ConfigTable>> table_arrays;

    const ConfigTable& table(const std::string& name) const {
        static const ConfigTable empty;
        const auto it = tables.find(name);
        return it == tables.end() ? empty : it->second;
    }
    bool has_table(const std::string& name) const { return tables.contains(name); }
    const std::vector<ConfigTable>& array(const std::string& name) const {
        static const std::vector<ConfigTable> none;
        const auto it = table_arrays.find(name);
        return it == table_arrays.end() ? none : it->second;
    }
};

namespace detail {

class ConfigParser {
public:
    explicit ConfigParser(std::string_view text) : m_text(text) {}

    ConfigDocument parse() {
        ConfigDocument doc;
        ConfigTable* current = &doc.tables[""];
        while (true) {
            skip_blank_lines();
            if (m_pos >= m_text.size()) break;
            if (peek() == '[') {
                const bool is_array = m_text.substr(m_pos, 2) == "[[";
                m_pos += is_array ? 2 : 1;
                const std::string name = bare_key();
                expect(is_array ? "]]" : "]");
                end_of_line();
                if (is_array) {
                    auto& list = doc.table_arrays[name];
                    list.emplace_back();
                    current = &list.back();
                } else {
                    if (doc.tables.contains(name)) fail("duplicate table [" + name + "]");
                    current = &doc.tables[name];
                }
                current->name = name;
                continue;
            }
            const std::size_t line = m_line;
            const std::string key = bare_key();
            skip_spaces();
            expect("=");
            skip_spaces();
            ConfigValue value = parse_value();
            end_of_line();
            current->set(key, std::move(value), line);
        }
        return doc;
    }

private:
    [[noreturn]] void fail(const std::string& what) const {
        throw Error("config line " + std::to_string(m_line) + ": " + what);
    }
    char peek() const { return m_pos < m_text.size() ? m_text[m_pos] : '\0'; }
    void skip_spaces() {
        while (peek() == ' ' || peek() == '\t') ++m_pos;
    }
    void skip_comment() {
        if (peek() == '#') {
            while (m_pos < m_text.size() && m_text[m_pos] != '\n') ++m_pos;
        }
    }
    void newline() {
        if (peek() == '\r') ++m_pos;
        if (peek() != '\n') fail("expected end of line");
        ++m_pos;
        ++m_line;
    }
    void skip_blank_lines() {
        while (true) {
            skip_spaces();
            skip_comment();
            if (m_pos >= m_text.size()) return;
            if (peek() != '\n' && peek() != '\r') return;
            newline();
        }
    }
    // Whitespace, comments and newlines inside arrays.
    void skip_insignificant() {
        while (true) {
            skip_spaces();
            skip_comment();
            if (peek() == '\n' || peek() == '\r') {
                newline();
                continue;
            }
            return;
        }
    }
    void end_of_line() {
        skip_spaces();
        skip_comment();
        if (m_pos < m_text.size()) newline();
    }
    void expect(std::string_view token) {
        if (m_text.substr(m_pos, token.size()) != token) fail("expected '" + std::string(token) + "'");
        m_pos += token.size();
    }
    std::string bare_key() {
        skip_spaces();
        const std::size_t start = m_pos;
        while (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-') ++m_pos;
        if (m_pos == start) fail("expected a key");
        if (peek() == '.') fail("dotted keys are not supported");
        std::string key(m_text.substr(start, m_pos - start));
        skip_spaces();
        return key;
    }

    ConfigValue parse_value() {
        const char c = peek();
        if (c == '"') return {parse_string()};
        if (c == '[') {
            ++m_pos;
            ConfigArray items;
            skip_insignificant();
            while (peek() != ']') {
                if (m_pos >= m_text.size()) fail("unterminated array");
                items.push_back(parse_value());
                skip_insignificant();
                if (peek() == ',') {
                    ++m_pos;
                    skip_insignificant();
                } else if (peek() != ']') {
                    fail("expected ',' or ']' in array");
                }
            }
            ++m_pos;
            return {std::move(items)};
        }
        if (c == '{') fail("inline tables are not supported");
        if (m_text.substr(m_pos, 4) == "true") {
            m_pos += 4;
            return {true};
        }
        if (m_text.substr(m_pos, 5) == "false") {
            m_pos += 5;
            return {false};
        }
        return parse_number();
    }

    std::string parse_string() {
        ++m_pos;
        std::string out;
        while (true) {
            if (m_pos >= m_text.size() || peek() == '\n') fail("unterminated string");
            const char c = m_text[m_pos++];
            if (c == '"') return out;
            if (c != '\\') {
                out += c;
                continue;
            }
            const char e = peek();
            ++m_pos;
            switch (e) {
                case '"': out += '"'; break;
                case '\\': out += '\\'; break;
                case 'n': out += '\n'; break;
                case 't': out += '\t'; break;
                default: fail(std::string("unsupported escape \\") + e);
            }
        }
    }

    ConfigValue parse_number() {
        const std::size_t start = m_pos;
        while (m_pos < m_text.size() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' ||
                                         peek() == '-' || peek() == '.' || peek() == '_')) {
            ++m_pos;
        }
        std::string token;
        for (char c : m_text.substr(start, m_pos - start)) {
            if (c != '_') token += c;
        }
        if (token.empty()) fail("expected a value");
        if (token.front() == '+') token.erase(0, 1);
        const bool is_float = token.find_first_of(".eE") != std::string::npos;
        const char* first = token.data();
        const char* last = token.data() + token.size();
        if (is_float) {
            double d = 0.0;
            const auto [ptr, ec] = std::from_chars(first, last, d);
            if (ec != std::errc{} || ptr != last) fail("bad number '" + token + "'");
            return {d};
        }
        std::int64_t i = 0;
        const auto [ptr, ec] = std::from_chars(first, last, i);
        if (ec != std::errc{} || ptr != last) fail("bad value '" + token + "'");
        return {i};
    }

    std::string_view m_text;
    std::size_t m_pos = 0;
    std::size_t m_line = 1;
};

}  // namespace detail

inline ConfigDocument parse_config(std::string_view text) { return detail::ConfigParser(text).parse(); }

inline ConfigDocument load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), "cannot open config " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

}  // namespace kvtier
