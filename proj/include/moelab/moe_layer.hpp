// SPDX-License-Identifier: Apache-2.0
//
// One MoE layer: SwiGLU experts, grouped dispatch, weighted combine, and the
// matching backward pass.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moelab/balance.hpp"
#include "moelab/core.hpp"
#include "moelab/router.hpp"

namespace moelab {

/// Two-layer SwiGLU FFN without bias terms:
/// y = W2 * (swish(W1 x) ⊙ (W3 x)).
struct ExpertParams {
    Matrix w1;  // m x d (gate projection)
    Matrix w3;  // m x d (up projection)
    Matrix w2;  // d x m (down projection)
};

struct MoELayer {
    RouterState router;
    std::vector<ExpertParams> experts;
    std::size_t layer_index = 0;

    std::size_t num_experts() const noexcept { return experts.size(); }
};

/// Router and experts drawn from N(0, init_std^2), keyed by (seed, layer).
MoELayer make_layer(const LabConfig& cfg, std::uint64_t seed, std::size_t layer,
                    double init_std = 0.02);

/// Throws ShapeError when any parameter shape disagrees with `cfg`.
void check_layer(const MoELayer& layer, const LabConfig& cfg);

double swish(double z) noexcept;
std::vector<double> swiglu_forward(std::span<const double> x, const ExpertParams& e);

struct GateOptions {
    bool renormalize = true;  // only affects K > 1
    bool fp32 = false;
};

/// Per-expert sub-batch kept for the backward pass.
struct ExpertCache {
    std::vector<std::size_t> tokens;  // ascending token order
    Matrix input;                     // n x d
    Matrix a1, a3;                    // n x m pre-activations
    Matrix hidden;                    // swish(a1) ⊙ a3
    Matrix output;                    // n x d, ungated expert output
};

struct MoEForward {
    Matrix input;  // N_B x d
    Matrix outputs;
    RoutingDecision decision;
    LoadStats stats;
    std::vector<ExpertCache> experts;
    // Row of (token, slot) inside its expert's sub-batch.
    std::vector<std::size_t> slot_rows;
};

MoEForward moe_forward(const TokenBatch& batch, const MoELayer& layer,
                       const BalanceStrategy& strategy, std::size_t top_k,
                       const GateOptions& gates = {});

struct ExpertGrads {
    Matrix w1, w3, w2;
};

struct LayerGrads {
    Matrix gate_weights;
    std::vector<ExpertGrads> experts;

    void zero();
};

LayerGrads zero_grads(const MoELayer& layer);

/// Backpropagates `upstream` (dLoss/dOutputs) through combine, experts and
/// gate probabilities, adding parameter gradients into `grads` in token
/// order. `balance_logit_grad`, when given, is alpha * dLBL/dlogits for
/// these tokens and is added to the router's logit gradient. Returns
/// dLoss/dInput.
Matrix moe_backward(const Matrix& upstream, const MoEForward& fwd, const MoELayer& layer,
                    LayerGrads& grads, const Matrix* balance_logit_grad = nullptr);

/// Single-scope convenience: computes the balance gradient of `strategy`
/// on this batch alone.
Matrix moe_backward(const Matrix& upstream, const MoEForward& fwd, const MoELayer& layer,
                    const BalanceStrategy& strategy, LayerGrads& grads);

}  // namespace moelab
