// SPDX-License-Identifier: Apache-2.0

#include "moelab/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "moelab/kernels.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {
constexpr std::uint64_t kRouterStream = 0x526F75746572ULL;  // "Router"
}

RouterState make_router(const LabConfig& cfg, std::uint64_t seed, std::size_t layer,
                        double init_std) {
    RouterState r;
    r.gate_weights = Matrix(cfg.hidden_size, cfg.num_experts);
    const CounterRng rng(seed, kRouterStream, layer);
    for (std::size_t i = 0; i < r.gate_weights.size(); ++i)
        r.gate_weights.values()[i] = init_std * rng.normal(i);
    r.expert_bias.assign(cfg.num_experts, 0.0);
    return r;
}

Matrix compute_logits(const TokenBatch& batch, const RouterState& router, bool fp32) {
    if (batch.hidden_size() != router.hidden_size())
        throw ShapeError("compute_logits: token width " + std::to_string(batch.hidden_size()) +
                         " does not match router width " + std::to_string(router.hidden_size()));
    return fp32 ? kernels::matmul_f32(batch.embeddings, router.gate_weights)
                : kernels::matmul(batch.embeddings, router.gate_weights);
}

Matrix softmax_probs(const Matrix& logits, double tau) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t j = 0; j < logits.rows(); ++j) {
        const auto z = logits.row(j);
        auto out = p.row(j);
        const double zmax = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            out[i] = std::exp((z[i] - zmax) / tau);
            sum += out[i];
        }
        for (double& v : out) v /= sum;
    }
    return p;
}

Matrix add_bias(const Matrix& logits, std::span<const double> bias) {
    if (bias.size() != logits.cols()) throw ShapeError("add_bias: bias length mismatch");
    Matrix s = logits;
    for (std::size_t j = 0; j < s.rows(); ++j)
        for (std::size_t i = 0; i < s.cols(); ++i) s(j, i) += bias[i];
    return s;
}

RoutingDecision select_top_k(const Matrix& decision_scores, const Matrix& probs, std::size_t k,
                             bool renormalize) {
    if (decision_scores.rows() != probs.rows() || decision_scores.cols() != probs.cols())
        throw ShapeError("select_top_k: scores and probs differ in shape");
    const std::size_t n_e = probs.cols();
    if (k > n_e) throw ConfigError("top_k exceeds num_experts");
    if (k == 0) throw ConfigError("top_k must be at least 1");

    RoutingDecision d;
    d.top_k = k;
    d.renormalized = renormalize && k > 1;
    d.probs = probs;
    d.assignments.resize(probs.rows() * k);
    d.gate_values.resize(probs.rows() * k);

    std::vector<std::size_t> idx(n_e);
    for (std::size_t j = 0; j < probs.rows(); ++j) {
        const auto s = decision_scores.row(j);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                          [&](std::size_t a, std::size_t b) {
                              return s[a] > s[b] || (s[a] == s[b] && a < b);
                          });
        double sel_sum = 0.0;
        for (std::size_t slot = 0; slot < k; ++slot) {
            d.assignments[j * k + slot] = idx[slot];
            d.gate_values[j * k + slot] = probs(j, idx[slot]);
            sel_sum += probs(j, idx[slot]);
        }
        if (renormalize && k > 1)
            for (std::size_t slot = 0; slot < k; ++slot) d.gate_values[j * k + slot] /= sel_sum;
    }
    return d;
}

RoutingDecision route(const TokenBatch& batch, const RouterState& router, const LabConfig& cfg,
                      bool use_bias) {
    Matrix logits = compute_logits(batch, router, cfg.fp32_gating);
    Matrix probs = softmax_probs(logits, 1.0);
    RoutingDecision d = use_bias ? select_top_k(add_bias(logits, router.expert_bias), probs,
                                                cfg.top_k, cfg.renormalize_gates)
                                 : select_top_k(logits, probs, cfg.top_k, cfg.renormalize_gates);
    d.logits = std::move(logits);
    return d;
}

LoadStats accumulate_load(const RoutingDecision& decision, std::size_t num_experts) {
    if (decision.num_experts() != num_experts)
        throw ShapeError("accumulate_load: decision expert count mismatch");
    const std::size_t n = decision.num_tokens();
    LoadStats s;
    s.num_tokens = n;
    s.top_k = decision.top_k;
    s.scope = StatScope::micro_batch;
    s.counts.assign(num_experts, 0);
    for (std::size_t e : decision.assignments) ++s.counts[e];
    s.fractions.resize(num_experts);
    s.mean_probs.assign(num_experts, 0.0);
    for (std::size_t i = 0; i < num_experts; ++i)
        s.fractions[i] = static_cast<double>(s.counts[i]) / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < num_experts; ++i) s.mean_probs[i] += decision.probs(j, i);
    for (double& p : s.mean_probs) p /= static_cast<double>(n);
    return s;
}

}  // namespace moelab
