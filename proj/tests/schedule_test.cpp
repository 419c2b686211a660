// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "moelab/schedule.hpp"

namespace moelab {
namespace {

TEST(SparsityTest, EarlyCountsThenTarget) {
    const SparsitySchedule s;
    EXPECT_EQ(activated_experts_at(0, 0.5, s), 8u);
    EXPECT_EQ(activated_experts_at(0, 0.95, s), 1u);
    EXPECT_EQ(activated_experts_at(20, 0.1, s), 1u);
    const std::size_t early[] = {8, 8, 6, 6, 4, 4, 2, 2};
    for (std::ptrdiff_t l = 0; l < 8; ++l) {
        EXPECT_EQ(activated_experts_at(l, 0.0, s), early[l]);
        EXPECT_EQ(activated_experts_at(l, std::nextafter(0.9, 0.0), s), early[l]);
        EXPECT_EQ(activated_experts_at(l, 0.9, s), 1u);
    }
    EXPECT_THROW(activated_experts_at(-1, 0.5, s), ConfigError);
    EXPECT_THROW(activated_experts_at(0, 1.5, s), ConfigError);
}

TEST(SparsityTest, Validation) {
    EXPECT_NO_THROW(validate_schedule(SparsitySchedule{}, 96));
    EXPECT_THROW(validate_schedule(SparsitySchedule{}, 4), ConfigError);
    EXPECT_THROW(validate_schedule(SparsitySchedule{{}, 1, 1.5}, 4), ConfigError);
    EXPECT_THROW(validate_schedule(SparsitySchedule::constant(0), 4), ConfigError);
}

LrSchedule reference_lr() { return LrSchedule{}; }

TEST(LrTest, Anchors) {
    const auto s = reference_lr();
    EXPECT_EQ(learning_rate_at(0, s), 0.0);
    EXPECT_EQ(learning_rate_at(2000, s), 2.6e-4);
    EXPECT_EQ(learning_rate_at(s.total_steps, s), 2.6e-5);
    EXPECT_DOUBLE_EQ(learning_rate_at(1000, s), 1.3e-4);
    EXPECT_EQ(learning_rate_at(60'000, s), 2.6e-4);
    EXPECT_NEAR(learning_rate_at(90'000, s), 1.6e-4, 1e-18);
    EXPECT_THROW(learning_rate_at(-1, s), ConfigError);
    EXPECT_THROW(learning_rate_at(s.total_steps + 1, s), ConfigError);
}

TEST(LrTest, ContinuousAndNonIncreasingAfterWarmup) {
    const auto s = reference_lr();
    // Steepest cosine slope of either decay phase, per step.
    const double t = static_cast<double>(s.total_steps);
    const double slope = std::max((s.peak_lr - s.mid_lr) / (s.mid_fraction * t),
                                  (s.mid_lr - s.final_lr) / ((1 - s.stable_fraction - s.mid_fraction) * t)) *
                         std::numbers::pi / 2;
    double prev = learning_rate_at(s.warmup_steps, s);
    for (std::int64_t t = s.warmup_steps + 1; t <= s.total_steps; ++t) {
        const double lr = learning_rate_at(t, s);
        EXPECT_LE(lr, prev + 1e-18);
        EXPECT_LE(prev - lr, slope * 1.0001) << "jump at step " << t;
        prev = lr;
    }
}

TEST(LrTest, ProgressPlacesLaterPhases) {
    const auto s = reference_lr();
    EXPECT_EQ(learning_rate_at_progress(10, 0.99, s), 2.6e-4 * 10 / 2000);
    EXPECT_EQ(learning_rate_at_progress(5000, 0.5, s), 2.6e-4);
    EXPECT_NEAR(learning_rate_at_progress(5000, 0.9, s), 1.6e-4, 1e-18);
}

TEST(LrTest, Validation) {
    auto s = reference_lr();
    EXPECT_NO_THROW(validate_schedule(s));
    s.stable_fraction = 0.8;
    EXPECT_THROW(validate_schedule(s), ConfigError);
    s = reference_lr();
    s.final_lr = 0;
    EXPECT_THROW(validate_schedule(s), ConfigError);
}

TEST(BatchRampTest, Anchors) {
    const BatchRamp r;
    EXPECT_EQ(batch_size_at(0.0, r), 1920);
    EXPECT_EQ(batch_size_at(0.2, r), 4800);
    for (double p : {0.4, 0.5, 0.9, 1.0}) EXPECT_EQ(batch_size_at(p, r), 7680);
    BatchRamp g = r;
    g.granularity = 64;
    EXPECT_EQ(batch_size_at(0.2, g) % 64, 0);
    EXPECT_EQ(batch_size_at(0.2, g), 4800 - 4800 % 64 + (4800 % 64 >= 32 ? 64 : 0));
}

TEST(BatchRampTest, NonDecreasing) {
    const BatchRamp r{1920, 7680, 0.4, 32};
    std::int64_t prev = 0;
    for (int i = 0; i <= 1000; ++i) {
        const auto b = batch_size_at(i / 1000.0, r);
        EXPECT_GE(b, prev);
        prev = b;
    }
    EXPECT_THROW(validate_ramp({0, 10, 0.4, 1}), ConfigError);
    EXPECT_THROW(validate_ramp({1, 10, 0.4, 0}), ConfigError);
}

TEST(ParamsTest, ClosedForms) {
    LabConfig toy;
    toy.hidden_size = 8;
    toy.expert_intermediate_size = 6;
    toy.num_layers = 4;
    const ParamAccounting none{0};
    EXPECT_EQ(activated_params(toy, SparsitySchedule::constant(1), 0.0, none), 576u);
    LabConfig ref = LabConfig::reference_scale();
    EXPECT_EQ(activated_params(ref, SparsitySchedule::constant(1), 0.3, none),
              56ull * 3 * 1536 * 768);
}

TEST(ParamsTest, ReferenceScaleRatio) {
    const LabConfig c = LabConfig::reference_scale();
    const SparsitySchedule s;
    const double early = static_cast<double>(activated_params(c, s, 0.5));
    const double target = static_cast<double>(activated_params(c, s, 0.95));
    const double want = 0.50 / 0.65;
    EXPECT_LE(std::abs(target / early - want) / want, 0.05);
    // Extra early experts: 7+7+5+5+3+3+1+1 = 32 of them.
    EXPECT_EQ(early - target, 32.0 * 3 * 1536 * 768);
}

}  // namespace
}  // namespace moelab
