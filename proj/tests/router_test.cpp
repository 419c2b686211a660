// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "moelab/router.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

RouterState router_from(Matrix w) {
    RouterState r;
    r.expert_bias.assign(w.cols(), 0.0);
    r.gate_weights = std::move(w);
    return r;
}

TEST(LogitsTest, ZeroEmbeddings) {
    std::mt19937_64 rng(1);
    const auto r = router_from(test::random_matrix(rng, 5, 3));
    const Matrix z = compute_logits(TokenBatch{Matrix(4, 5)}, r);
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(LogitsTest, HandCase) {
    const auto r = router_from(Matrix(2, 2, {3, 0, 0, 5}));
    const Matrix z = compute_logits(TokenBatch{Matrix(1, 2, {1, 0})}, r);
    EXPECT_EQ(z(0, 0), 3.0);
    EXPECT_EQ(z(0, 1), 0.0);
}

TEST(LogitsTest, RandomMatchesDenseProduct) {
    std::mt19937_64 rng(2);
    const Matrix x = test::random_matrix(rng, 4, 6);
    const auto r = router_from(test::random_matrix(rng, 6, 3));
    EXPECT_LE(test::max_abs_diff(compute_logits(TokenBatch{x}, r), test::naive_matmul(x, r.gate_weights)),
              1e-13);
    // fp32 path stays within single precision of the oracle
    EXPECT_LE(test::max_abs_diff(compute_logits(TokenBatch{x}, r, true),
                                 test::naive_matmul(x, r.gate_weights)),
              1e-5);
}

TEST(LogitsTest, WidthMismatch) {
    const auto r = router_from(Matrix(3, 2));
    EXPECT_THROW(compute_logits(TokenBatch{Matrix(1, 4)}, r), ShapeError);
}

TEST(SoftmaxTest, UniformLogits) {
    const Matrix p = softmax_probs(Matrix(2, 96, 0.7), 1.0);
    for (double v : p.values()) EXPECT_NEAR(v, 1.0 / 96, 1e-15);
}

TEST(SoftmaxTest, HandValue) {
    const Matrix p = softmax_probs(Matrix(1, 2, {std::log(2.0), 0.0}), 1.0);
    EXPECT_NEAR(p(0, 0), 2.0 / 3, 1e-15);
    EXPECT_NEAR(p(0, 1), 1.0 / 3, 1e-15);
}

TEST(SoftmaxTest, SharpTemperature) {
    const Matrix p = softmax_probs(Matrix(1, 2, {10.0, 0.0}), 0.1);
    EXPECT_GT(p(0, 0), 1.0 - 1e-9);
}

TEST(SoftmaxTest, LargeLogitsStayFinite) {
    const Matrix p = softmax_probs(Matrix(1, 3, {1e4, 1e4 - 1, -1e4}), 1.0);
    EXPECT_TRUE(p.all_finite());
    EXPECT_NEAR(p(0, 0) + p(0, 1) + p(0, 2), 1.0, 1e-15);
}

TEST(SelectTest, Argmax) {
    const Matrix s(1, 3, {0.1, 0.9, 0.3});
    const auto d = select_top_k(s, s, 1);
    EXPECT_EQ(d.expert(0, 0), 1u);
}

TEST(SelectTest, TiesGoToLowestIndex) {
    const Matrix s(1, 4, 0.25);
    EXPECT_EQ(select_top_k(s, s, 1).expert(0, 0), 0u);
    const auto d2 = select_top_k(s, s, 2);
    EXPECT_EQ(d2.expert(0, 0), 0u);
    EXPECT_EQ(d2.expert(0, 1), 1u);
}

TEST(SelectTest, BiasChangesSelectionNotGate) {
    const Matrix logits(1, 3, {0.2, 0.5, 0.1});
    const Matrix probs = softmax_probs(logits, 1.0);
    const std::vector<double> bias{0, 0, 10};
    const auto d = select_top_k(add_bias(logits, bias), probs, 1);
    EXPECT_EQ(d.expert(0, 0), 2u);
    // gate comes from the unbiased softmax
    const double z = std::exp(0.2) + std::exp(0.5) + std::exp(0.1);
    EXPECT_NEAR(d.gate(0, 0), std::exp(0.1) / z, 1e-15);
    const auto plain = select_top_k(logits, probs, 1);
    EXPECT_EQ(plain.expert(0, 0), 1u);
}

TEST(SelectTest, RenormalizedGatesSumToOne) {
    std::mt19937_64 rng(3);
    const Matrix p = softmax_probs(test::random_matrix(rng, 5, 6), 1.0);
    const auto d = select_top_k(p, p, 3, true);
    for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_NEAR(d.gate(j, 0) + d.gate(j, 1) + d.gate(j, 2), 1.0, 1e-14);
        EXPECT_GE(p(j, d.expert(j, 0)), p(j, d.expert(j, 1)));
        EXPECT_GE(p(j, d.expert(j, 1)), p(j, d.expert(j, 2)));
    }
    const auto raw = select_top_k(p, p, 3, false);
    EXPECT_EQ(raw.gate(0, 0), p(0, raw.expert(0, 0)));
}

TEST(SelectTest, BadK) {
    const Matrix s(1, 3);
    EXPECT_THROW(select_top_k(s, s, 4), ConfigError);
    EXPECT_THROW(select_top_k(s, s, 0), ConfigError);
    EXPECT_THROW(select_top_k(s, Matrix(1, 2), 1), ShapeError);
}

RoutingDecision decision_from(std::vector<std::size_t> experts, std::size_t n_e) {
    RoutingDecision d;
    d.top_k = 1;
    d.assignments = std::move(experts);
    d.gate_values.assign(d.assignments.size(), 1.0);
    d.probs = Matrix(d.assignments.size(), n_e, 1.0 / static_cast<double>(n_e));
    return d;
}

TEST(LoadTest, Degenerate) {
    const auto s = accumulate_load(decision_from({0, 0, 0, 0}, 2), 2);
    EXPECT_EQ(s.fractions, (std::vector<double>{1.0, 0.0}));
    EXPECT_EQ(s.counts, (std::vector<std::int64_t>{4, 0}));
    EXPECT_EQ(s.scope, StatScope::micro_batch);
}

TEST(LoadTest, EvenSplit) {
    const auto s = accumulate_load(decision_from({0, 1, 1, 0}, 2), 2);
    EXPECT_EQ(s.fractions, (std::vector<double>{0.5, 0.5}));
}

TEST(LoadTest, RandomMatchesCountingOracle) {
    std::mt19937_64 rng(4);
    LabConfig cfg;
    cfg.num_experts = 7;
    cfg.top_k = 2;
    cfg.hidden_size = 5;
    const auto r = router_from(test::random_matrix(rng, 5, 7));
    const Matrix x = test::random_matrix(rng, 30, 5);
    const auto d = route(TokenBatch{x}, r, cfg, false);
    const auto s = accumulate_load(d, 7);
    std::vector<std::int64_t> counts(7, 0);
    std::vector<double> psum(7, 0.0);
    for (std::size_t j = 0; j < 30; ++j) {
        for (std::size_t k = 0; k < 2; ++k) ++counts[d.assignments[j * 2 + k]];
        for (std::size_t i = 0; i < 7; ++i) psum[i] += d.probs(j, i);
    }
    EXPECT_EQ(s.counts, counts);
    for (std::size_t i = 0; i < 7; ++i) {
        EXPECT_DOUBLE_EQ(s.fractions[i], counts[i] / 30.0);
        EXPECT_NEAR(s.mean_probs[i], psum[i] / 30.0, 1e-15);
    }
    EXPECT_TRUE(load_stats_consistent(s));
}

TEST(RouteTest, BiasOnlyUsedWhenRequested) {
    LabConfig cfg;
    cfg.num_experts = 3;
    cfg.hidden_size = 2;
    auto r = router_from(Matrix(2, 3, {1, 0, 0, 0, 1, 0}));
    r.expert_bias = {0, 0, 5};
    const TokenBatch b{Matrix(1, 2, {1, 0})};
    EXPECT_EQ(route(b, r, cfg, false).expert(0, 0), 0u);
    const auto biased = route(b, r, cfg, true);
    EXPECT_EQ(biased.expert(0, 0), 2u);
    EXPECT_EQ(biased.logits(0, 2), 0.0);
}

TEST(RouterTest, InitIsDeterministic) {
    LabConfig cfg;
    const auto a = make_router(cfg, 9, 2), b = make_router(cfg, 9, 2), c = make_router(cfg, 9, 3);
    EXPECT_EQ(a.gate_weights, b.gate_weights);
    EXPECT_NE(a.gate_weights, c.gate_weights);
    EXPECT_EQ(a.hidden_size(), cfg.hidden_size);
    EXPECT_EQ(a.num_experts(), cfg.num_experts);
}

}  // namespace
}  // namespace moelab
