// SPDX-License-Identifier: Apache-2.0
//
// Gating network: logits, softmax, top-k selection and
// per-expert load accumulation.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "moelab/core.hpp"

namespace moelab {

struct RouterState {
    Matrix gate_weights;              // d x N_E
    std::vector<double> expert_bias;  // N_E, selection-only (loss-free balancing)

    std::size_t hidden_size() const noexcept { return gate_weights.rows(); }
    std::size_t num_experts() const noexcept { return gate_weights.cols(); }
};

/// Gate weights ~ N(0, init_std^2), zero bias. Draws are keyed by (seed, layer).
RouterState make_router(const LabConfig& cfg, std::uint64_t seed, std::size_t layer,
                        double init_std = 0.02);

struct RoutingDecision {
    std::size_t top_k = 1;
    bool renormalized = false;             // gate values divided by selected mass
    std::vector<std::size_t> assignments;  // N_B x K, highest score first
    std::vector<double> gate_values;       // N_B x K
    Matrix logits;                         // N_B x N_E, without bias
    Matrix probs;                          // N_B x N_E

    std::size_t num_tokens() const noexcept { return probs.rows(); }
    std::size_t num_experts() const noexcept { return probs.cols(); }
    std::size_t expert(std::size_t token, std::size_t slot) const noexcept {
        return assignments[token * top_k + slot];
    }
    double gate(std::size_t token, std::size_t slot) const noexcept {
        return gate_values[token * top_k + slot];
    }
};

/// logits[j][i] = <embedding_j, gate column i>. With `fp32` the product is
/// evaluated entirely in 32-bit floats.
Matrix compute_logits(const TokenBatch& batch, const RouterState& router, bool fp32 = false);

/// Row-wise softmax of logits / tau with max subtraction.
Matrix softmax_probs(const Matrix& logits, double tau);

/// scores + broadcast bias.
Matrix add_bias(const Matrix& logits, std::span<const double> bias);

/// Picks the K highest decision scores per token (ties to the lowest index).
/// Gate values come from `probs` at the selected indices; for K > 1 they are
/// renormalized over the selection when `renormalize` is set. The returned
/// decision has empty logits; `route` fills them.
RoutingDecision select_top_k(const Matrix& decision_scores, const Matrix& probs, std::size_t k,
                             bool renormalize = true);

/// Full gating pass: logits, plain-softmax probabilities, optionally
/// bias-adjusted selection.
RoutingDecision route(const TokenBatch& batch, const RouterState& router, const LabConfig& cfg,
                      bool use_bias);

/// Micro-batch load statistics of one decision.
LoadStats accumulate_load(const RoutingDecision& decision, std::size_t num_experts);

}  // namespace moelab
