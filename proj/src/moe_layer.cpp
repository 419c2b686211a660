// SPDX-License-Identifier: Apache-2.0

#include "moelab/moe_layer.hpp"

#include <cmath>
#include <string>

#include "moelab/kernels.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

constexpr std::uint64_t kExpertStream = 0x457870657274ULL;  // "Expert"

Matrix random_matrix(std::size_t rows, std::size_t cols, const CounterRng& rng, double std_dev) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = std_dev * rng.normal(i);
    return m;
}

double sigmoid(double z) noexcept { return 1.0 / (1.0 + std::exp(-z)); }

// d swish / dz = sigma(z) * (1 + z * (1 - sigma(z)))
double swish_grad(double z) noexcept {
    const double s = sigmoid(z);
    return s * (1.0 + z * (1.0 - s));
}

void require_shape(const Matrix& m, std::size_t r, std::size_t c, const char* what) {
    if (m.rows() != r || m.cols() != c)
        throw ShapeError(std::string(what) + ": expected " + std::to_string(r) + "x" +
                         std::to_string(c) + ", got " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()));
}

}  // namespace

double swish(double z) noexcept { return z * sigmoid(z); }

MoELayer make_layer(const LabConfig& cfg, std::uint64_t seed, std::size_t layer,
                    double init_std) {
    MoELayer l;
    l.layer_index = layer;
    l.router = make_router(cfg, seed, layer, init_std);
    const std::size_t d = cfg.hidden_size, m = cfg.expert_intermediate_size;
    l.experts.reserve(cfg.num_experts);
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
        ExpertParams p;
        p.w1 = random_matrix(m, d, CounterRng(seed, kExpertStream, layer, 3 * e), init_std);
        p.w3 = random_matrix(m, d, CounterRng(seed, kExpertStream, layer, 3 * e + 1), init_std);
        p.w2 = random_matrix(d, m, CounterRng(seed, kExpertStream, layer, 3 * e + 2), init_std);
        l.experts.push_back(std::move(p));
    }
    return l;
}

void check_layer(const MoELayer& layer, const LabConfig& cfg) {
    const std::size_t d = cfg.hidden_size, m = cfg.expert_intermediate_size;
    if (layer.experts.size() != cfg.num_experts)
        throw ShapeError("layer has " + std::to_string(layer.experts.size()) + " experts, expected " +
                         std::to_string(cfg.num_experts));
    require_shape(layer.router.gate_weights, d, cfg.num_experts, "gate_weights");
    if (layer.router.expert_bias.size() != cfg.num_experts)
        throw ShapeError("expert_bias length mismatch");
    for (const auto& e : layer.experts) {
        require_shape(e.w1, m, d, "w1");
        require_shape(e.w3, m, d, "w3");
        require_shape(e.w2, d, m, "w2");
    }
}

std::vector<double> swiglu_forward(std::span<const double> x, const ExpertParams& e) {
    const std::size_t m = e.w1.rows(), d = e.w1.cols();
    if (x.size() != d) throw ShapeError("swiglu_forward: input width mismatch");
    std::vector<double> h(m);
    for (std::size_t r = 0; r < m; ++r) {
        double a1 = 0.0, a3 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            a1 += e.w1(r, c) * x[c];
            a3 += e.w3(r, c) * x[c];
        }
        h[r] = swish(a1) * a3;
    }
    std::vector<double> y(d, 0.0);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < m; ++c) y[r] += e.w2(r, c) * h[c];
    return y;
}

MoEForward moe_forward(const TokenBatch& batch, const MoELayer& layer,
                       const BalanceStrategy& strategy, std::size_t top_k,
                       const GateOptions& gates) {
    const std::size_t n = batch.num_tokens(), d = batch.hidden_size();
    const std::size_t n_e = layer.num_experts();
    if (top_k > n_e) throw ConfigError("top_k exceeds num_experts");
    if (layer.router.num_experts() != n_e) throw ShapeError("router and expert counts differ");

    MoEForward f;
    f.input = batch.embeddings;
    Matrix logits = compute_logits(batch, layer.router, gates.fp32);
    Matrix probs = softmax_probs(logits, 1.0);
    f.decision = strategy.uses_bias()
                     ? select_top_k(add_bias(logits, layer.router.expert_bias), probs, top_k,
                                    gates.renormalize)
                     : select_top_k(logits, probs, top_k, gates.renormalize);
    f.decision.logits = std::move(logits);
    f.stats = accumulate_load(f.decision, n_e);

    // Grouped dispatch with stable token order.
    f.experts.resize(n_e);
    f.slot_rows.resize(n * top_k);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < top_k; ++k) {
            auto& ex = f.experts[f.decision.expert(j, k)];
            f.slot_rows[j * top_k + k] = ex.tokens.size();
            ex.tokens.push_back(j);
        }

    const long ne_l = static_cast<long>(n_e);
#pragma omp parallel for schedule(dynamic)
    for (long el = 0; el < ne_l; ++el) {
        const auto e = static_cast<std::size_t>(el);
        auto& ex = f.experts[e];
        const auto& p = layer.experts[e];
        const std::size_t rows = ex.tokens.size();
        ex.input = Matrix(rows, d);
        for (std::size_t r = 0; r < rows; ++r) {
            const auto src = batch.embeddings.row(ex.tokens[r]);
            std::copy(src.begin(), src.end(), ex.input.row(r).begin());
        }
        if (rows == 0) continue;
        ex.a1 = kernels::matmul_a_bt(ex.input, p.w1);
        ex.a3 = kernels::matmul_a_bt(ex.input, p.w3);
        ex.hidden = Matrix(rows, p.w1.rows());
        for (std::size_t i = 0; i < ex.hidden.size(); ++i)
            ex.hidden.values()[i] = swish(ex.a1.values()[i]) * ex.a3.values()[i];
        ex.output = kernels::matmul_a_bt(ex.hidden, p.w2);
    }

    // Combine in slot order per token.
    f.outputs = Matrix(n, d);
    for (std::size_t j = 0; j < n; ++j) {
        auto out = f.outputs.row(j);
        for (std::size_t k = 0; k < top_k; ++k) {
            const auto& ex = f.experts[f.decision.expert(j, k)];
            const auto y = ex.output.row(f.slot_rows[j * top_k + k]);
            const double g = f.decision.gate(j, k);
            for (std::size_t c = 0; c < d; ++c) out[c] += g * y[c];
        }
    }
    return f;
}

void LayerGrads::zero() {
    gate_weights.fill(0.0);
    for (auto& e : experts) {
        e.w1.fill(0.0);
        e.w3.fill(0.0);
        e.w2.fill(0.0);
    }
}

LayerGrads zero_grads(const MoELayer& layer) {
    LayerGrads g;
    g.gate_weights = Matrix(layer.router.gate_weights.rows(), layer.router.gate_weights.cols());
    for (const auto& e : layer.experts)
        g.experts.push_back({Matrix(e.w1.rows(), e.w1.cols()), Matrix(e.w3.rows(), e.w3.cols()),
                             Matrix(e.w2.rows(), e.w2.cols())});
    return g;
}

Matrix moe_backward(const Matrix& upstream, const MoEForward& fwd, const MoELayer& layer,
                    LayerGrads& grads, const Matrix* balance_logit_grad) {
    const auto& dec = fwd.decision;
    const std::size_t n = dec.num_tokens(), n_e = dec.num_experts(), k_sel = dec.top_k;
    if (fwd.experts.size() != n_e || fwd.slot_rows.size() != n * k_sel || fwd.input.rows() != n)
        throw ConfigError("moe_backward: missing or inconsistent forward cache");
    const std::size_t d = fwd.input.cols();
    require_shape(upstream, n, d, "moe_backward upstream");
    if (balance_logit_grad) require_shape(*balance_logit_grad, n, n_e, "balance gradient");
    if (grads.experts.size() != n_e) throw ShapeError("moe_backward: gradient buffer mismatch");

    Matrix dinput(n, d);

    // Gate gradients: dL/dg_jk = <upstream_j, expert output>.
    std::vector<double> dgate(n * k_sel, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < k_sel; ++k) {
            const auto y = fwd.experts[dec.expert(j, k)].output.row(fwd.slot_rows[j * k_sel + k]);
            const auto u = upstream.row(j);
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += u[c] * y[c];
            dgate[j * k_sel + k] = acc;
        }

    // Experts.
    std::vector<Matrix> expert_dinput(n_e);
    const long ne_l = static_cast<long>(n_e);
#pragma omp parallel for schedule(dynamic)
    for (long el = 0; el < ne_l; ++el) {
        const auto e = static_cast<std::size_t>(el);
        const auto& ex = fwd.experts[e];
        const std::size_t rows = ex.tokens.size();
        if (rows == 0) continue;
        const auto& p = layer.experts[e];
        auto& g = grads.experts[e];
        Matrix dout(rows, d);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t j = ex.tokens[r];
            double gate = 0.0;
            for (std::size_t k = 0; k < k_sel; ++k)
                if (dec.expert(j, k) == e) gate = dec.gate(j, k);
            const auto u = upstream.row(j);
            auto dst = dout.row(r);
            for (std::size_t c = 0; c < d; ++c) dst[c] = gate * u[c];
        }
        kernels::accumulate_at_b(g.w2, dout, ex.hidden);
        Matrix dhidden = kernels::matmul(dout, p.w2);
        Matrix da1(rows, p.w1.rows()), da3(rows, p.w1.rows());
        for (std::size_t i = 0; i < dhidden.size(); ++i) {
            const double a1 = ex.a1.values()[i];
            da1.values()[i] = dhidden.values()[i] * ex.a3.values()[i] * swish_grad(a1);
            da3.values()[i] = dhidden.values()[i] * swish(a1);
        }
        kernels::accumulate_at_b(g.w1, da1, ex.input);
        kernels::accumulate_at_b(g.w3, da3, ex.input);
        Matrix di = kernels::matmul(da1, p.w1);
        const Matrix di3 = kernels::matmul(da3, p.w3);
        for (std::size_t i = 0; i < di.size(); ++i) di.values()[i] += di3.values()[i];
        expert_dinput[e] = std::move(di);
    }
    // Gather expert input gradients per token in slot order.
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < k_sel; ++k) {
            const std::size_t e = dec.expert(j, k);
            const auto src = expert_dinput[e].row(fwd.slot_rows[j * k_sel + k]);
            auto dst = dinput.row(j);
            for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
        }

    // Gates -> probabilities -> logits.
    Matrix dlogits(n, n_e);
    std::vector<double> dprob(n_e);
    const bool renorm = dec.renormalized;
    for (std::size_t j = 0; j < n; ++j) {
        std::fill(dprob.begin(), dprob.end(), 0.0);
        if (renorm) {
            double sel = 0.0;
            for (std::size_t k = 0; k < k_sel; ++k) sel += dec.probs(j, dec.expert(j, k));
            // g_k = p_k / P  =>  dg_k/dp_s = (delta_ks - g_k) / P
            double gdot = 0.0;
            for (std::size_t k = 0; k < k_sel; ++k) gdot += dgate[j * k_sel + k] * dec.gate(j, k);
            for (std::size_t k = 0; k < k_sel; ++k)
                dprob[dec.expert(j, k)] += (dgate[j * k_sel + k] - gdot) / sel;
        } else {
            for (std::size_t k = 0; k < k_sel; ++k) dprob[dec.expert(j, k)] += dgate[j * k_sel + k];
        }
        double dp_p = 0.0;
        for (std::size_t i = 0; i < n_e; ++i) dp_p += dprob[i] * dec.probs(j, i);
        for (std::size_t l = 0; l < n_e; ++l)
            dlogits(j, l) = dec.probs(j, l) * (dprob[l] - dp_p);
    }
    if (balance_logit_grad)
        for (std::size_t i = 0; i < dlogits.size(); ++i)
            dlogits.values()[i] += balance_logit_grad->values()[i];

    kernels::accumulate_at_b(grads.gate_weights, fwd.input, dlogits);
    const Matrix dr = kernels::matmul_a_bt(dlogits, layer.router.gate_weights);
    for (std::size_t i = 0; i < dinput.size(); ++i) dinput.values()[i] += dr.values()[i];
    return dinput;
}

Matrix moe_backward(const Matrix& upstream, const MoEForward& fwd, const MoELayer& layer,
                    const BalanceStrategy& strategy, LayerGrads& grads) {
    if (!strategy.has_loss()) return moe_backward(upstream, fwd, layer, grads, nullptr);
    const Matrix bg = balance_gradient(strategy, fwd.decision.logits, fwd.decision);
    return moe_backward(upstream, fwd, layer, grads, &bg);
}

}  // namespace moelab
