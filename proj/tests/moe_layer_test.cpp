// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "moelab/moe_layer.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

LabConfig small_cfg(std::size_t n_e, std::size_t d, std::size_t m) {
    LabConfig c;
    c.num_experts = n_e;
    c.hidden_size = d;
    c.expert_intermediate_size = m;
    c.num_layers = 1;
    return c;
}

MoELayer random_layer(std::mt19937_64& rng, std::size_t n_e, std::size_t d, std::size_t m,
                      double scale = 0.5) {
    MoELayer l;
    l.router.gate_weights = test::random_matrix(rng, d, n_e, scale);
    l.router.expert_bias.assign(n_e, 0.0);
    for (std::size_t e = 0; e < n_e; ++e)
        l.experts.push_back({test::random_matrix(rng, m, d, scale), test::random_matrix(rng, m, d, scale),
                             test::random_matrix(rng, d, m, scale)});
    return l;
}

// Scalar loops straight from the definition.
std::vector<double> swiglu_oracle(const std::vector<double>& x, const ExpertParams& e) {
    const std::size_t m = e.w1.rows(), d = e.w1.cols();
    std::vector<double> y(d, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        double a = 0.0, b = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            a += e.w1(r, c) * x[c];
            b += e.w3(r, c) * x[c];
        }
        const double h = a / (1.0 + std::exp(-a)) * b;
        for (std::size_t c = 0; c < d; ++c) y[c] += e.w2(c, r) * h;
    }
    return y;
}

// Token-at-a-time routing and combine, no batching.
Matrix moe_oracle(const Matrix& x, const MoELayer& l, std::size_t k, double tau, bool use_bias) {
    const std::size_t n_e = l.num_experts(), d = x.cols();
    Matrix out(x.rows(), d);
    for (std::size_t j = 0; j < x.rows(); ++j) {
        std::vector<double> z(n_e, 0.0), p(n_e), s(n_e);
        for (std::size_t i = 0; i < n_e; ++i)
            for (std::size_t c = 0; c < d; ++c) z[i] += x(j, c) * l.router.gate_weights(c, i);
        double mx = z[0], sum = 0.0;
        for (double v : z) mx = std::max(mx, v);
        for (std::size_t i = 0; i < n_e; ++i) sum += (p[i] = std::exp((z[i] - mx) / tau));
        for (double& v : p) v /= sum;
        for (std::size_t i = 0; i < n_e; ++i) s[i] = z[i] + (use_bias ? l.router.expert_bias[i] : 0.0);
        std::vector<bool> taken(n_e, false);
        std::vector<std::size_t> chosen;
        double sel = 0.0;
        for (std::size_t slot = 0; slot < k; ++slot) {
            std::size_t best = n_e;
            for (std::size_t i = 0; i < n_e; ++i)
                if (!taken[i] && (best == n_e || s[i] > s[best])) best = i;
            taken[best] = true;
            chosen.push_back(best);
            sel += p[best];
        }
        const std::vector<double> xj(x.row(j).begin(), x.row(j).end());
        for (std::size_t e : chosen) {
            const double g = k > 1 ? p[e] / sel : p[e];
            const auto y = swiglu_oracle(xj, l.experts[e]);
            for (std::size_t c = 0; c < d; ++c) out(j, c) += g * y[c];
        }
    }
    return out;
}

TEST(SwigluTest, ZeroInput) {
    std::mt19937_64 rng(1);
    const auto l = random_layer(rng, 1, 4, 3);
    for (double v : swiglu_forward(std::vector<double>(4, 0.0), l.experts[0])) EXPECT_EQ(v, 0.0);
}

TEST(SwigluTest, ScalarHandValue) {
    const ExpertParams e{Matrix(1, 1, 1.0), Matrix(1, 1, 1.0), Matrix(1, 1, 1.0)};
    const auto y = swiglu_forward(std::vector<double>{1.0}, e);
    EXPECT_NEAR(y[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
    EXPECT_NEAR(y[0], 0.731059, 1e-6);
}

TEST(SwigluTest, RandomMatchesScalarLoops) {
    std::mt19937_64 rng(2);
    const auto l = random_layer(rng, 1, 7, 5);
    const auto x = test::random_matrix(rng, 1, 7).values();
    const auto y = swiglu_forward(x, l.experts[0]);
    const auto r = swiglu_oracle(x, l.experts[0]);
    for (std::size_t c = 0; c < 7; ++c) EXPECT_NEAR(y[c], r[c], 1e-12);
}

TEST(MoEForwardTest, LinearExpertsScaleTheirInput) {
    // On the line x0 + x1 = 1 with x >= 0, a1 = 1e3 saturates the sigmoid, so
    // swish(a1) = a1 exactly and expert e computes (1 + e) * x.
    const std::size_t d = 2, n_e = 3;
    MoELayer l;
    l.router.gate_weights = Matrix(d, n_e, {1, 0, 0, 0, 1, 0});
    l.router.expert_bias.assign(n_e, 0.0);
    for (std::size_t e = 0; e < n_e; ++e) {
        const double c = 1.0 + static_cast<double>(e);
        l.experts.push_back({Matrix(2, 2, 1e3), Matrix(2, 2, {c * 1e-3, 0, 0, c * 1e-3}),
                             Matrix(2, 2, {1, 0, 0, 1})});
    }
    const Matrix x(3, d, {0.3, 0.7, 0.9, 0.1, 0.5, 0.5});
    const auto f = moe_forward(TokenBatch{x}, l, {}, 1);
    for (std::size_t j = 0; j < 3; ++j) {
        const double c = 1.0 + static_cast<double>(f.decision.expert(j, 0));
        for (std::size_t k = 0; k < d; ++k)
            EXPECT_NEAR(f.outputs(j, k), f.decision.gate(j, 0) * c * x(j, k), 1e-12);
    }
}

TEST(MoEForwardTest, FullActivationIsConvexCombine) {
    std::mt19937_64 rng(3);
    const auto l = random_layer(rng, 2, 4, 3);
    const Matrix x = test::random_matrix(rng, 5, 4);
    const auto f = moe_forward(TokenBatch{x}, l, {}, 2);
    for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_NEAR(f.decision.gate(j, 0) + f.decision.gate(j, 1), 1.0, 1e-15);
        const std::vector<double> xj(x.row(j).begin(), x.row(j).end());
        const auto y0 = swiglu_oracle(xj, l.experts[0]), y1 = swiglu_oracle(xj, l.experts[1]);
        const double g0 = f.decision.probs(j, 0), g1 = f.decision.probs(j, 1);
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(f.outputs(j, c), g0 * y0[c] + g1 * y1[c], 1e-12);
    }
}

TEST(MoEForwardTest, MatchesPerTokenOracle) {
    std::mt19937_64 rng(4);
    for (std::size_t k : {1, 2}) {
        auto l = random_layer(rng, 3, 5, 4);
        const Matrix x = test::random_matrix(rng, 6, 5);
        EXPECT_LE(test::max_abs_diff(moe_forward(TokenBatch{x}, l, {}, k).outputs,
                                     moe_oracle(x, l, k, 1.0, false)),
                  1e-12);
        l.router.expert_bias = {0.0, 0.4, -0.3};
        const BalanceStrategy lf{BalanceKind::loss_free, 0.0, 0.5, 1e-3};
        EXPECT_LE(test::max_abs_diff(moe_forward(TokenBatch{x}, l, lf, k).outputs,
                                     moe_oracle(x, l, k, 1.0, true)),
                  1e-12);
    }
}

TEST(MoEForwardTest, TokenConservation) {
    std::mt19937_64 rng(5);
    const auto l = random_layer(rng, 5, 4, 3);
    const auto f = moe_forward(TokenBatch{test::random_matrix(rng, 13, 4)}, l, {}, 3);
    std::int64_t total = 0;
    for (auto c : f.stats.counts) total += c;
    EXPECT_EQ(total, 3 * 13);
    std::size_t rows = 0;
    for (const auto& e : f.experts) rows += e.tokens.size();
    EXPECT_EQ(rows, 39u);
}

TEST(MoEForwardTest, RejectsBadShapes) {
    std::mt19937_64 rng(6);
    const auto l = random_layer(rng, 3, 4, 2);
    EXPECT_THROW(moe_forward(TokenBatch{Matrix(2, 4)}, l, {}, 4), ConfigError);
    EXPECT_THROW(moe_forward(TokenBatch{Matrix(2, 5)}, l, {}, 1), ShapeError);
    EXPECT_THROW(check_layer(l, small_cfg(3, 4, 3)), ShapeError);
    EXPECT_NO_THROW(check_layer(l, small_cfg(3, 4, 2)));
}

TEST(MoEBackwardTest, ZeroUpstreamGivesZeroGradients) {
    std::mt19937_64 rng(7);
    const auto l = random_layer(rng, 3, 4, 2);
    const auto f = moe_forward(TokenBatch{test::random_matrix(rng, 6, 4)}, l, {}, 2);
    auto g = zero_grads(l);
    const Matrix dx = moe_backward(Matrix(6, 4), f, l, BalanceStrategy{}, g);
    for (double v : dx.values()) EXPECT_EQ(v, 0.0);
    for (double v : g.gate_weights.values()) EXPECT_EQ(v, 0.0);
    for (const auto& e : g.experts)
        for (const Matrix* m : {&e.w1, &e.w3, &e.w2})
            for (double v : m->values()) EXPECT_EQ(v, 0.0);
}

std::vector<Matrix*> all_params(MoELayer& l) {
    std::vector<Matrix*> ps{&l.router.gate_weights};
    for (auto& e : l.experts) ps.insert(ps.end(), {&e.w1, &e.w3, &e.w2});
    return ps;
}

std::vector<const Matrix*> all_grads(const LayerGrads& g) {
    std::vector<const Matrix*> gs{&g.gate_weights};
    for (const auto& e : g.experts) gs.insert(gs.end(), {&e.w1, &e.w3, &e.w2});
    return gs;
}

struct FdCase {
    std::size_t k;
    BalanceKind kind;
    double tau;
};

class MoEBackwardFd : public ::testing::TestWithParam<FdCase> {};

TEST_P(MoEBackwardFd, MatchesFiniteDifferences) {
    const auto c = GetParam();
    std::mt19937_64 rng(100 + c.k * 7 + static_cast<int>(c.kind));
    const std::size_t n = 6, n_e = 3, d = 4, m = 3;
    MoELayer l = random_layer(rng, n_e, d, m);
    Matrix x = test::random_matrix(rng, n, d);
    const Matrix r = test::random_matrix(rng, n, d);
    const BalanceStrategy strat{c.kind, 0.3, c.tau, 0.0};

    const auto base = moe_forward(TokenBatch{x}, l, strat, c.k);
    const std::vector<double> f_fixed = base.stats.fractions;
    auto loss = [&] {
        const auto f = moe_forward(TokenBatch{x}, l, strat, c.k);
        double acc = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) acc += r.values()[i] * f.outputs.values()[i];
        if (c.kind == BalanceKind::top1_lbl) acc += strat.alpha * top1_lbl(f.decision.logits, c.tau);
        if (c.kind == BalanceKind::lbl_micro_batch) {
            LoadStats s = f.stats;
            s.fractions = f_fixed;  // detached
            acc += strat.alpha * conventional_lbl(s);
        }
        return acc;
    };

    auto g = zero_grads(l);
    const Matrix dx = moe_backward(r, base, l, strat, g);
    const auto params = all_params(l);
    const auto grads = all_grads(g);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto num = test::numeric_grad(params[i]->values(), loss);
        EXPECT_LE(test::rel_error(grads[i]->values(), num), 1e-5) << "parameter block " << i;
    }
    const auto num_x = test::numeric_grad(x.values(), loss);
    EXPECT_LE(test::rel_error(dx.values(), num_x), 1e-5) << "input";
}

INSTANTIATE_TEST_SUITE_P(Cases, MoEBackwardFd,
                         ::testing::Values(FdCase{1, BalanceKind::none, 1.0},
                                           FdCase{2, BalanceKind::none, 0.7},
                                           FdCase{1, BalanceKind::lbl_micro_batch, 1.0},
                                           FdCase{2, BalanceKind::lbl_micro_batch, 1.0},
                                           FdCase{1, BalanceKind::top1_lbl, 0.5}));

TEST(MoEBackwardTest, StarvedExpertHasExactlyZeroGradient) {
    std::mt19937_64 rng(8);
    MoELayer l = random_layer(rng, 3, 4, 2);
    l.router.gate_weights = test::random_matrix(rng, 4, 3, 0.1);
    for (std::size_t c = 0; c < 4; ++c) l.router.gate_weights(c, 2) = -5.0;
    Matrix x = test::random_matrix(rng, 8, 4);
    for (double& v : x.values()) v = std::abs(v) + 0.1;
    const auto f = moe_forward(TokenBatch{x}, l, {}, 1);
    ASSERT_EQ(f.stats.counts[2], 0);
    auto g = zero_grads(l);
    moe_backward(test::random_matrix(rng, 8, 4), f, l, BalanceStrategy{}, g);
    for (const Matrix* m : {&g.experts[2].w1, &g.experts[2].w3, &g.experts[2].w2})
        for (double v : m->values()) EXPECT_EQ(v, 0.0);
}

TEST(MoEBackwardTest, RejectsMismatchedUpstream) {
    std::mt19937_64 rng(9);
    const auto l = random_layer(rng, 2, 3, 2);
    const auto f = moe_forward(TokenBatch{test::random_matrix(rng, 4, 3)}, l, {}, 1);
    auto g = zero_grads(l);
    EXPECT_THROW(moe_backward(Matrix(4, 2), f, l, BalanceStrategy{}, g), ShapeError);
    auto broken = f;
    broken.experts.clear();
    EXPECT_THROW(moe_backward(Matrix(4, 3), broken, l, BalanceStrategy{}, g), ConfigError);
}

TEST(MakeLayerTest, ShapesAndDeterminism) {
    const auto cfg = small_cfg(4, 6, 5);
    const auto a = make_layer(cfg, 3, 1), b = make_layer(cfg, 3, 1);
    EXPECT_NO_THROW(check_layer(a, cfg));
    EXPECT_EQ(a.experts[2].w2, b.experts[2].w2);
    EXPECT_NE(a.experts[2].w1, a.experts[3].w1);
}

}  // namespace
}  // namespace moelab
