// SPDX-License-Identifier: Apache-2.0
//
// Load-balancing strategies and their analytic gradients with respect to
// router logits.
//
//   conventional LBL   N_E * sum_i f_i * p_i          (f detached)
//   top-1 LBL          N_E * sum_i fhat_i^2 / pbar_top1
//   loss-free          sign-of-load bias controller, no gradient

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "moelab/core.hpp"
#include "moelab/router.hpp"

namespace moelab {

enum class BalanceKind { none, lbl_micro_batch, lbl_global_batch, top1_lbl, loss_free };

const char* to_string(BalanceKind k);
/// Throws ConfigError for an unknown name.
BalanceKind parse_balance_kind(std::string_view name);

struct BalanceStrategy {
    BalanceKind kind = BalanceKind::none;
    double alpha = 1e-3;
    /// Temperature of the probabilities inside the top-1 LBL only. Gating
    /// probabilities are always a plain softmax of the logits.
    double tau = 1.0;
    double gamma = 1e-3;

    bool has_loss() const noexcept {
        return kind == BalanceKind::lbl_micro_batch || kind == BalanceKind::lbl_global_batch ||
               kind == BalanceKind::top1_lbl;
    }
    bool uses_bias() const noexcept { return kind == BalanceKind::loss_free; }
};

/// Throws ConfigError unless tau > 0 and alpha, gamma are finite and nonnegative.
void validate_strategy(const BalanceStrategy& s);

double conventional_lbl(const LoadStats& stats);

/// d(conventional LBL)/d(logits) for `probs` rows drawn from a scope of
/// `scope_tokens` tokens whose (detached) allocation fractions are `f`.
Matrix conventional_lbl_grad(const Matrix& probs, std::span<const double> f,
                             std::size_t scope_tokens, double tau);

/// Mean of f and p over groups, counts summed. All groups must agree on
/// N_E and token count.
LoadStats global_batch_reduce(std::span<const LoadStats> local_stats);

/// Soft allocation fractions and mean top-1 probability of one scope.
struct Top1Stats {
    std::vector<double> soft_fractions;  // fhat_i
    double mean_top1 = 0.0;              // pbar_top1
    std::size_t num_tokens = 0;
};

Top1Stats top1_stats(const Matrix& probs);
/// Average of per-group statistics (equal group sizes).
Top1Stats reduce_top1(std::span<const Top1Stats> local);
double top1_lbl(const Top1Stats& stats);
double top1_lbl(const Matrix& logits, double tau);

/// d(top-1 LBL)/d(logits) for `probs` rows belonging to the scope described
/// by `scope`. The per-token max routes its gradient to the argmax entry,
/// lowest index on ties.
Matrix top1_lbl_grad(const Matrix& probs, const Top1Stats& scope, double tau);

/// alpha * d(loss)/d(logits) for a single-scope batch. Throws ConfigError
/// for strategies without a loss.
Matrix balance_gradient(const BalanceStrategy& strategy, const Matrix& logits,
                        const RoutingDecision& decision);

/// b_i += gamma if expert i is below the mean count, -= gamma if above.
std::vector<double> bias_update(std::span<const double> bias,
                                std::span<const std::int64_t> counts, double gamma);

}  // namespace moelab
