// SPDX-License-Identifier: Apache-2.0

#include "moelab/balance.hpp"

#include <cmath>
#include <string>

#include "moelab/parallel_sim.hpp"

namespace moelab {

const char* to_string(BalanceKind k) {
    switch (k) {
        case BalanceKind::none: return "none";
        case BalanceKind::lbl_micro_batch: return "lbl_micro_batch";
        case BalanceKind::lbl_global_batch: return "lbl_global_batch";
        case BalanceKind::top1_lbl: return "top1_lbl";
        case BalanceKind::loss_free: return "loss_free";
    }
    return "?";
}

BalanceKind parse_balance_kind(std::string_view name) {
    for (auto k : {BalanceKind::none, BalanceKind::lbl_micro_batch, BalanceKind::lbl_global_batch,
                   BalanceKind::top1_lbl, BalanceKind::loss_free})
        if (name == to_string(k)) return k;
    throw ConfigError("unknown balance strategy '" + std::string(name) + "'");
}

void validate_strategy(const BalanceStrategy& s) {
    if (!std::isfinite(s.tau) || s.tau <= 0) throw ConfigError("temperature must be positive");
    if (!std::isfinite(s.alpha) || s.alpha < 0)
        throw ConfigError("lbl_coefficient must be finite and nonnegative");
    if (!std::isfinite(s.gamma) || s.gamma < 0)
        throw ConfigError("bias_step must be finite and nonnegative");
}

double conventional_lbl(const LoadStats& stats) {
    const std::size_t n_e = stats.num_experts();
    double acc = 0.0;
    for (std::size_t i = 0; i < n_e; ++i) acc += stats.fractions[i] * stats.mean_probs[i];
    return static_cast<double>(n_e) * acc;
}

Matrix conventional_lbl_grad(const Matrix& probs, std::span<const double> f,
                             std::size_t scope_tokens, double tau) {
    if (f.size() != probs.cols()) throw ShapeError("conventional_lbl_grad: f length mismatch");
    if (scope_tokens == 0) throw ConfigError("conventional_lbl_grad: empty scope");
    const std::size_t n_e = probs.cols();
    // dL/dz_jl = N_E / (N tau) * p_jl * (f_l - sum_i f_i p_ji)
    const double scale = static_cast<double>(n_e) / (static_cast<double>(scope_tokens) * tau);
    Matrix g(probs.rows(), n_e);
    for (std::size_t j = 0; j < probs.rows(); ++j) {
        double fp = 0.0;
        for (std::size_t i = 0; i < n_e; ++i) fp += f[i] * probs(j, i);
        for (std::size_t l = 0; l < n_e; ++l) g(j, l) = scale * probs(j, l) * (f[l] - fp);
    }
    return g;
}

LoadStats global_batch_reduce(std::span<const LoadStats> local_stats) {
    if (local_stats.empty()) throw ConfigError("global_batch_reduce: no groups");
    const auto& first = local_stats.front();
    const std::size_t n_e = first.num_experts();
    std::vector<std::vector<double>> fs, ps;
    LoadStats out;
    out.scope = StatScope::global_batch;
    out.top_k = first.top_k;
    out.counts.assign(n_e, 0);
    for (const auto& s : local_stats) {
        if (s.num_experts() != n_e) throw ShapeError("global_batch_reduce: mismatched N_E");
        if (s.num_tokens != first.num_tokens)
            throw ConfigError("global_batch_reduce: unequal local batch sizes");
        if (s.top_k != first.top_k) throw ConfigError("global_batch_reduce: mismatched top_k");
        fs.push_back(s.fractions);
        ps.push_back(s.mean_probs);
        for (std::size_t i = 0; i < n_e; ++i) out.counts[i] += s.counts[i];
        out.num_tokens += s.num_tokens;
    }
    out.fractions = all_reduce_mean(fs);
    out.mean_probs = all_reduce_mean(ps);
    return out;
}

Top1Stats top1_stats(const Matrix& probs) {
    Top1Stats s;
    const std::size_t n = probs.rows(), n_e = probs.cols();
    s.num_tokens = n;
    s.soft_fractions.assign(n_e, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double best = probs(j, 0);
        for (std::size_t i = 0; i < n_e; ++i) {
            s.soft_fractions[i] += probs(j, i);
            if (probs(j, i) > best) best = probs(j, i);
        }
        s.mean_top1 += best;
    }
    for (double& v : s.soft_fractions) v /= static_cast<double>(n);
    s.mean_top1 /= static_cast<double>(n);
    return s;
}

Top1Stats reduce_top1(std::span<const Top1Stats> local) {
    if (local.empty()) throw ConfigError("reduce_top1: no groups");
    std::vector<std::vector<double>> fs, tops;
    Top1Stats out;
    for (const auto& s : local) {
        if (s.num_tokens != local.front().num_tokens)
            throw ConfigError("reduce_top1: unequal local batch sizes");
        fs.push_back(s.soft_fractions);
        tops.push_back({s.mean_top1});
        out.num_tokens += s.num_tokens;
    }
    out.soft_fractions = all_reduce_mean(fs);
    out.mean_top1 = all_reduce_mean(tops).front();
    return out;
}

double top1_lbl(const Top1Stats& stats) {
    double sq = 0.0;
    for (double f : stats.soft_fractions) sq += f * f;
    return static_cast<double>(stats.soft_fractions.size()) * sq / stats.mean_top1;
}

double top1_lbl(const Matrix& logits, double tau) {
    return top1_lbl(top1_stats(softmax_probs(logits, tau)));
}

Matrix top1_lbl_grad(const Matrix& probs, const Top1Stats& scope, double tau) {
    const std::size_t n_e = probs.cols();
    if (scope.soft_fractions.size() != n_e) throw ShapeError("top1_lbl_grad: N_E mismatch");
    const double n = static_cast<double>(scope.num_tokens);
    const double ne = static_cast<double>(n_e);
    double sq = 0.0;
    for (double f : scope.soft_fractions) sq += f * f;
    const double pbar = scope.mean_top1;
    // dL/dp_ji = 2 N_E fhat_i / (N pbar) - [i == argmax_j] N_E sq / (N pbar^2)
    const double top_term = ne * sq / (n * pbar * pbar);
    std::vector<double> q(n_e);
    Matrix g(probs.rows(), n_e);
    for (std::size_t j = 0; j < probs.rows(); ++j) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < n_e; ++i)
            if (probs(j, i) > probs(j, arg)) arg = i;
        for (std::size_t i = 0; i < n_e; ++i) q[i] = 2.0 * ne * scope.soft_fractions[i] / (n * pbar);
        q[arg] -= top_term;
        double qp = 0.0;
        for (std::size_t i = 0; i < n_e; ++i) qp += q[i] * probs(j, i);
        for (std::size_t l = 0; l < n_e; ++l) g(j, l) = probs(j, l) * (q[l] - qp) / tau;
    }
    return g;
}

Matrix balance_gradient(const BalanceStrategy& strategy, const Matrix& logits,
                        const RoutingDecision& decision) {
    if (!strategy.has_loss())
        throw ConfigError(std::string("balance_gradient: strategy '") + to_string(strategy.kind) +
                          "' has no gradient");
    if (logits.rows() != decision.num_tokens() || logits.cols() != decision.num_experts())
        throw ShapeError("balance_gradient: logits and decision differ in shape");
    Matrix g;
    if (strategy.kind == BalanceKind::top1_lbl) {
        const Matrix probs = softmax_probs(logits, strategy.tau);
        g = top1_lbl_grad(probs, top1_stats(probs), strategy.tau);
    } else {
        const LoadStats stats = accumulate_load(decision, decision.num_experts());
        g = conventional_lbl_grad(softmax_probs(logits, 1.0), stats.fractions, decision.num_tokens(),
                                  1.0);
    }
    for (double& v : g.values()) v *= strategy.alpha;
    return g;
}

std::vector<double> bias_update(std::span<const double> bias,
                                std::span<const std::int64_t> counts, double gamma) {
    if (bias.size() != counts.size()) throw ShapeError("bias_update: length mismatch");
    std::int64_t total = 0;
    for (auto c : counts) total += c;
    const auto n_e = static_cast<std::int64_t>(counts.size());
    std::vector<double> out(bias.begin(), bias.end());
    // Compare count_i against total / N_E without rounding.
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const std::int64_t scaled = counts[i] * n_e;
        if (scaled < total) out[i] += gamma;
        else if (scaled > total) out[i] -= gamma;
    }
    return out;
}

}  // namespace moelab
