// Copyright (C) 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <string>

#include <gtest/gtest.h>

#include "kvtier/config.hpp"

using namespace kvtier;

namespace {

std::string error_of(std::string_view text) {
    try {
        parse_config(text);
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, ScalarsAndTables) {
    const auto doc = parse_config(R"(
name = "grid"   # trailing comment
seed = 7
[hierarchy]
beta = 0.5
interval = 64
t2 = false
big = 1_000
neg = -3
exp = 2.5e-3
)");
    EXPECT_EQ(doc.table("").get_string("name", ""), "grid");
    EXPECT_EQ(doc.table("").get_int("seed", 0), 7);
    const auto& h = doc.table("hierarchy");
    EXPECT_EQ(h.get_double("beta", 0), 0.5);
    EXPECT_EQ(h.get_size("interval", 0), 64u);
    EXPECT_FALSE(h.get_bool("t2", true));
    EXPECT_EQ(h.get_int("big", 0), 1000);
    EXPECT_EQ(h.get_int("neg", 0), -3);
    EXPECT_EQ(h.get_double("exp", 0), 2.5e-3);
    EXPECT_EQ(h.get_double("interval", 0), 64.0);  // integers widen to double
    EXPECT_EQ(h.get_double("missing", 9.5), 9.5);
    EXPECT_FALSE(doc.has_table("absent"));
    EXPECT_TRUE(doc.table("absent").values().empty());
}

TEST(Config, MultiLineArraysWithComments) {
    const auto doc = parse_config("betas = [\n  0.3,  # low\n  0.5,\n  0.7,\n]\nnames = [\"a\", \"b\\\"c\"]\n");
    EXPECT_EQ(doc.table("").get_doubles("betas", {}), (std::vector<double>{0.3, 0.5, 0.7}));
    EXPECT_EQ(doc.table("").get_strings("names", {}), (std::vector<std::string>{"a", "b\"c"}));
}

TEST(Config, ArrayOfTables) {
    const auto doc = parse_config("[[scenario]]\nname = \"7B\"\n[[scenario]]\nname = \"70B\"\nlayers = 80\n");
    const auto& list = doc.array("scenario");
    ASSERT_EQ(list.size(), 2u);
    EXPECT_EQ(list[1].get_string("name", ""), "70B");
    EXPECT_EQ(list[1].get_int("layers", 0), 80);
    EXPECT_TRUE(doc.array("none").empty());
}

TEST(Config, ErrorsCarryLineNumbers) {
    EXPECT_NE(error_of("a = 1\nb = \n").find("config line 2"), std::string::npos);
    EXPECT_NE(error_of("a = 1\n\n\nb = 1x\n").find("config line 4: bad value"), std::string::npos);
    EXPECT_NE(error_of("a = \"open\n").find("unterminated string"), std::string::npos);
    EXPECT_NE(error_of("a = [1, 2\n").find("config line 2"), std::string::npos);
    EXPECT_NE(error_of("a = 1 2\n").find("expected end of line"), std::string::npos);
}

TEST(Config, DuplicatesAreRejected) {
    EXPECT_NE(error_of("a = 1\na = 2\n").find("config line 2: duplicate key 'a'"), std::string::npos);
    EXPECT_NE(error_of("[t]\n[t]\n").find("duplicate table"), std::string::npos);
}

TEST(Config, UnsupportedSyntaxIsRejected) {
    EXPECT_NE(error_of("a.b = 1\n").find("dotted keys"), std::string::npos);
    EXPECT_NE(error_of("a = {b = 1}\n").find("inline tables"), std::string::npos);
    EXPECT_NE(error_of("a = 2024-01-01\n").find("bad value"), std::string::npos);
}

TEST(Config, TypeMismatchesNameTheKey) {
    const auto doc = parse_config("[run]\nbeta = \"half\"\nn = 1.5\nflag = 1\nneg = -1\n");
    const auto& t = doc.table("run");
    try {
        t.get_double("beta", 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("[run] beta must be a number"), std::string::npos);
    }
    EXPECT_THROW(t.get_int("n", 0), Error);
    EXPECT_THROW(t.get_bool("flag", false), Error);
    EXPECT_THROW(t.get_size("neg", 0), Error);
    EXPECT_THROW(t.get_doubles("n", {}), Error);
}

TEST(Config, MissingFile) {
    EXPECT_THROW(load_config("/nonexistent/x.toml"), Error);
}
