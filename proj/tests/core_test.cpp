// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "moelab/core.hpp"

namespace moelab {
namespace {

TEST(MatrixTest, ShapeAndAccess) {
    Matrix m(2, 3, 1.5);
    EXPECT_EQ(m.rows(), 2u);
    EXPECT_EQ(m.cols(), 3u);
    m(1, 2) = -4.0;
    EXPECT_EQ(m.row(1)[2], -4.0);
    EXPECT_EQ(m.values()[5], -4.0);
    EXPECT_TRUE(m.all_finite());
    m(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(m.all_finite());
}

TEST(MatrixTest, DataSizeMismatchThrows) {
    EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(ValidateConfigTest, ReferenceScaleAccepted) {
    const LabConfig c = LabConfig::reference_scale();
    EXPECT_EQ(c.num_experts, 96u);
    EXPECT_EQ(c.hidden_size, 1536u);
    EXPECT_EQ(c.expert_intermediate_size, 768u);
    const LabConfig back = validate_config(c);
    EXPECT_EQ(back.num_experts, c.num_experts);
    EXPECT_EQ(back.num_layers, c.num_layers);
}

TEST(ValidateConfigTest, TopKExceedsExperts) {
    LabConfig c;
    c.num_experts = 4;
    c.top_k = 5;
    try {
        validate_config(c);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_STREQ(e.what(), "top_k exceeds num_experts");
    }
}

TEST(ValidateConfigTest, ZeroTemperature) {
    LabConfig c;
    c.temperature = 0;
    try {
        validate_config(c);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_STREQ(e.what(), "temperature must be positive");
    }
}

TEST(ValidateConfigTest, OtherViolations) {
    auto bad = [](auto mutate) {
        LabConfig c;
        mutate(c);
        EXPECT_THROW(validate_config(c), ConfigError);
    };
    bad([](LabConfig& c) { c.num_experts = 0; });
    bad([](LabConfig& c) { c.top_k = 0; });
    bad([](LabConfig& c) { c.hidden_size = 0; });
    bad([](LabConfig& c) { c.num_parallel_groups = 0; });
    bad([](LabConfig& c) { c.lbl_coefficient = -1; });
    bad([](LabConfig& c) { c.lbl_coefficient = std::nan(""); });
    bad([](LabConfig& c) { c.bias_step = -1e-3; });
    bad([](LabConfig& c) { c.temperature = std::numeric_limits<double>::infinity(); });
}

TEST(ValidateBatchTest, RejectsEmptyAndNonFinite) {
    EXPECT_THROW(validate_batch(TokenBatch{Matrix(0, 4)}), ShapeError);
    TokenBatch b{Matrix(2, 2)};
    EXPECT_NO_THROW(validate_batch(b));
    b.embeddings(1, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(validate_batch(b), ShapeError);
}

TEST(LoadStatsTest, Consistency) {
    LoadStats s;
    s.counts = {3, 1};
    s.fractions = {0.75, 0.25};
    s.mean_probs = {0.6, 0.4};
    s.num_tokens = 4;
    EXPECT_TRUE(load_stats_consistent(s));
    s.counts = {3, 2};
    EXPECT_FALSE(load_stats_consistent(s));
}

}  // namespace
}  // namespace moelab
