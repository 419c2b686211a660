// SPDX-License-Identifier: Apache-2.0

#include "moelab/simharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "moelab/parallel_sim.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

constexpr std::uint64_t kCenterStream = 0x43656E746572ULL;  // "Center"
constexpr std::uint64_t kTargetStream = 0x546172676574ULL;  // "Target"
constexpr std::uint64_t kMapStream = 0x4D6170730000ULL;     // "Maps"
constexpr std::uint64_t kCommonStream = 0x436F6D6D6F6EULL;  // "Common"
constexpr std::uint64_t kTokenStream = 0x546F6B656E73ULL;   // "Tokens"
constexpr std::uint64_t kDistractStream = 0x446973747261ULL;  // "Distra"

}  // namespace

// ---------------------------------------------------------------- task

SyntheticTask make_task(const LabConfig& cfg, const TaskConfig& tc, std::uint64_t seed) {
    if (tc.num_clusters < 1) throw ConfigError("num_clusters must be at least 1");
    if (!(tc.separability >= 0)) throw ConfigError("separability must be nonnegative");
    for (double s : tc.layer_difficulty)
        if (!std::isfinite(s) || s < 0) throw ConfigError("layer_difficulty must be finite and >= 0");
    const std::size_t d = cfg.hidden_size, c = tc.num_clusters;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    SyntheticTask t;
    t.num_clusters = c;
    t.seed = seed;
    t.separability = tc.separability;
    t.distractor_scale = tc.distractor_scale;
    t.centers = Matrix(c, d);
    t.targets = Matrix(c, d);
    const CounterRng centers(seed, kCenterStream), targets(seed, kTargetStream),
        common(seed, kCommonStream);
    std::vector<double> offset(d);
    for (std::size_t k = 0; k < d; ++k) offset[k] = tc.common_scale * inv_sqrt_d * common.normal(k);
    // Random part is re-centered so the only shared direction is the offset.
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < c * d; ++i) {
        t.centers.values()[i] = tc.center_scale * inv_sqrt_d * centers.normal(i);
        mean[i % d] += t.centers.values()[i] / static_cast<double>(c);
        t.targets.values()[i] = tc.target_scale * inv_sqrt_d * targets.normal(i);
    }
    for (std::size_t i = 0; i < c * d; ++i)
        t.centers.values()[i] += offset[i % d] - (c > 1 ? mean[i % d] : 0.0);
    t.anchor.assign(d, 0.0);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t k = 0; k < d; ++k) t.anchor[k] += t.centers(i, k);
    for (double& a : t.anchor) a /= static_cast<double>(c);
    if (tc.map_scale != 0.0) {
        const CounterRng maps(seed, kMapStream);
        for (std::size_t i = 0; i < c; ++i) {
            Matrix m(d, d);
            for (std::size_t k = 0; k < d * d; ++k)
                m.values()[k] = tc.map_scale * inv_sqrt_d * maps.normal(i * d * d + k);
            t.maps.push_back(std::move(m));
        }
    }
    t.layer_difficulty.assign(cfg.num_layers, 1.0);
    for (std::size_t l = 0; l < cfg.num_layers && l < tc.layer_difficulty.size(); ++l)
        t.layer_difficulty[l] = tc.layer_difficulty[l];
    return t;
}

SampledBatch sample_batch(const SyntheticTask& task, std::int64_t step, std::size_t batch_size) {
    const std::size_t d = task.centers.cols(), c = task.num_clusters;
    SampledBatch b;
    b.tokens.embeddings = Matrix(batch_size, d);
    b.targets = Matrix(batch_size, d);
    b.clusters.resize(batch_size);
    const CounterRng rng(task.seed, kTokenStream, static_cast<std::uint64_t>(step));
    const double noise = std::isinf(task.separability) ? 0.0
                         : task.separability > 0
                             ? 1.0 / (task.separability * std::sqrt(static_cast<double>(d)))
                             : 1.0;
    const bool centered = task.separability > 0;
    std::vector<double> eps(d);
    for (std::size_t j = 0; j < batch_size; ++j) {
        const std::size_t cl = j * c / batch_size;
        b.clusters[j] = cl;
        for (std::size_t k = 0; k < d; ++k) {
            eps[k] = noise == 0.0 ? 0.0 : noise * rng.normal(j * d + k);
            const double x = (centered ? task.centers(cl, k) : 0.0) + eps[k];
            b.tokens.embeddings(j, k) = x;
            b.targets(j, k) = x + task.targets(cl, k);
        }
        if (!task.maps.empty()) {
            const Matrix& m = task.maps[cl];
            for (std::size_t r = 0; r < d; ++r) {
                double acc = 0.0;
                for (std::size_t k = 0; k < d; ++k) acc += m(r, k) * eps[k];
                b.targets(j, r) += acc;
            }
        }
    }
    return b;
}

Matrix layer_input(const SyntheticTask& task, std::size_t layer, const Matrix& residual,
                   std::int64_t step, std::size_t first_token) {
    const double s = task.difficulty(layer);
    if (s == 1.0) return residual;
    const std::size_t d = residual.cols();
    const double mix = task.distractor_scale * std::sqrt(std::max(0.0, 1.0 - s * s)) /
                       std::sqrt(static_cast<double>(d));
    const CounterRng rng(task.seed, kDistractStream, static_cast<std::uint64_t>(step), layer);
    Matrix u(residual.rows(), d);
    for (std::size_t j = 0; j < residual.rows(); ++j)
        for (std::size_t k = 0; k < d; ++k) {
            u(j, k) = task.anchor[k] + s * (residual(j, k) - task.anchor[k]);
            if (mix != 0.0) u(j, k) += mix * rng.normal((first_token + j) * d + k);
        }
    return u;
}

std::vector<std::size_t> nearest_center(const SyntheticTask& task, const Matrix& tokens) {
    std::vector<std::size_t> out(tokens.rows());
    for (std::size_t j = 0; j < tokens.rows(); ++j) {
        double best = INFINITY;
        for (std::size_t c = 0; c < task.num_clusters; ++c) {
            double dist = 0.0;
            for (std::size_t k = 0; k < tokens.cols(); ++k) {
                const double diff = tokens(j, k) - task.centers(c, k);
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                out[j] = c;
            }
        }
    }
    return out;
}

// ----------------------------------------------------------- optimizer

OptimizerState make_optimizer(std::span<const Matrix* const> params, const AdamWConfig& cfg) {
    OptimizerState s;
    s.config = cfg;
    for (const Matrix* p : params) {
        s.first_moment.emplace_back(p->rows(), p->cols());
        s.second_moment.emplace_back(p->rows(), p->cols());
    }
    return s;
}

double adamw_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                  OptimizerState& state, double lr) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size())
        throw ConfigError("adamw_step: parameter, gradient and state counts differ");
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->rows() != grads[i]->rows() || params[i]->cols() != grads[i]->cols() ||
            state.first_moment[i].size() != params[i]->size())
            throw ShapeError("adamw_step: shape mismatch at parameter " + std::to_string(i));
        for (double g : grads[i]->values()) {
            if (!std::isfinite(g)) throw ConfigError("adamw_step: non-finite gradient");
            sq += g * g;
        }
    }
    const auto& c = state.config;
    const double norm = std::sqrt(sq);
    const double scale = (c.grad_clip > 0 && norm > c.grad_clip) ? c.grad_clip / norm : 1.0;

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    const double decay = 1.0 - lr * c.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->values();
        const auto& g = grads[i]->values();
        auto& m = state.first_moment[i].values();
        auto& v = state.second_moment[i].values();
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k] * scale;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p[k] = p[k] * decay - lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
    return norm;
}

// ----------------------------------------------------------- experiment

std::vector<std::size_t> RunConfig::resolved_tracked_layers() const {
    if (!tracked_layers.empty()) return tracked_layers;
    std::vector<std::size_t> t{0, lab.num_layers / 2, lab.num_layers - 1};
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    return t;
}

void validate_run_config(const RunConfig& cfg) {
    validate_config(cfg.lab);
    validate_strategy(cfg.balance());
    validate_schedule(cfg.sparsity, cfg.lab.num_experts);
    if (cfg.sparsity.default_count != cfg.lab.top_k)
        throw ConfigError("sparsity.default_count must equal lab.top_k");
    validate_schedule(cfg.lr);
    validate_ramp(cfg.batch);
    if (cfg.steps < 0) throw ConfigError("train.steps must be nonnegative");
    if (cfg.stop_after < 0) throw ConfigError("train.stop_after must be nonnegative");
    if (cfg.snapshot_every < 1) throw ConfigError("log.snapshot_every must be positive");
    if (!(cfg.init_std >= 0) || !std::isfinite(cfg.init_std))
        throw ConfigError("init_std must be finite and nonnegative");
    const auto g = static_cast<std::int64_t>(cfg.lab.num_parallel_groups);
    if (cfg.batch.granularity % g != 0)
        throw ConfigError("batch.granularity must be a multiple of num_parallel_groups");
    if (cfg.task.num_clusters < 1) throw ConfigError("task.num_clusters must be at least 1");
    for (auto l : cfg.tracked_layers)
        if (l >= cfg.lab.num_layers) throw ConfigError("tracked layer outside the layer stack");
    const auto& o = cfg.optimizer;
    if (!(o.beta1 >= 0 && o.beta1 < 1 && o.beta2 >= 0 && o.beta2 < 1 && o.eps > 0 &&
          o.weight_decay >= 0))
        throw ConfigError("invalid AdamW hyperparameters");
}

StepPlan plan_steps(const RunConfig& cfg) {
    StepPlan p;
    const auto n = static_cast<std::size_t>(cfg.steps);
    p.batch_sizes.resize(n);
    for (std::size_t t = 0; t < n; ++t)
        p.batch_sizes[t] =
            batch_size_at(static_cast<double>(t) / static_cast<double>(n), cfg.batch);
    const double total = static_cast<double>(
        std::accumulate(p.batch_sizes.begin(), p.batch_sizes.end(), std::int64_t{0}));
    p.progress.resize(n);
    std::int64_t consumed = 0;
    for (std::size_t t = 0; t < n; ++t) {
        p.progress[t] = static_cast<double>(consumed) / total;
        consumed += p.batch_sizes[t];
    }
    return p;
}

Experiment::Experiment(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.lr.total_steps = std::max<std::int64_t>(cfg_.steps, 1);
    validate_run_config(cfg_);
    task_ = make_task(cfg_.lab, cfg_.task, cfg_.lab.seed);
    plan_ = plan_steps(cfg_);
    for (std::size_t l = 0; l < cfg_.lab.num_layers; ++l)
        model_.layers.push_back(make_layer(cfg_.lab, cfg_.lab.seed, l, cfg_.init_std));
    std::vector<const Matrix*> cp;
    for (Matrix* m : parameters()) cp.push_back(m);
    opt_ = make_optimizer(cp, cfg_.optimizer);
    record_ = RunRecord(cfg_.run_id, cfg_.lab.num_layers, cfg_.lab.num_experts,
                        cfg_.resolved_tracked_layers());
}

std::vector<Matrix*> Experiment::parameters() {
    std::vector<Matrix*> out;
    for (auto& l : model_.layers) {
        out.push_back(&l.router.gate_weights);
        for (auto& e : l.experts) {
            out.push_back(&e.w1);
            out.push_back(&e.w3);
            out.push_back(&e.w2);
        }
    }
    return out;
}

bool Experiment::finished() const noexcept {
    const std::int64_t end = cfg_.stop_after > 0 ? std::min(cfg_.stop_after, cfg_.steps) : cfg_.steps;
    return next_step_ >= end;
}

namespace {

struct GroupLayerState {
    MoEForward fwd;
    Matrix top1_probs;  // tau-scaled, top-1 LBL only
};

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

StepOutcome Experiment::forward_backward(std::int64_t step, bool train,
                                         std::vector<LayerGrads>* grads) const {
    const auto& lab = cfg_.lab;
    const std::size_t n_layers = lab.num_layers, n_e = lab.num_experts;
    const std::size_t groups = lab.num_parallel_groups;
    const bool planned = step >= 0 && static_cast<std::size_t>(step) < plan_.batch_sizes.size();
    const auto batch_size = static_cast<std::size_t>(
        planned ? plan_.batch_sizes[static_cast<std::size_t>(step)] : batch_size_at(0.0, cfg_.batch));
    const double progress = planned ? plan_.progress[static_cast<std::size_t>(step)] : 0.0;
    const BalanceStrategy strategy = cfg_.balance();
    const GateOptions gates{lab.renormalize_gates, lab.fp32_gating};

    const SampledBatch sb = sample_batch(task_, step, batch_size);
    auto shards = shard_batch(sb.tokens, groups);
    const std::size_t per = batch_size / groups;
    const double d = static_cast<double>(lab.hidden_size);

    StepOutcome out;
    out.record.step = step;
    out.record.progress = progress;
    out.record.batch_size = static_cast<std::int64_t>(batch_size);
    out.record.lr = (train && cfg_.steps > 0) ? learning_rate_at_progress(step, progress, cfg_.lr) : 0.0;

    std::vector<Matrix> residual(groups);
    for (std::size_t g = 0; g < groups; ++g) residual[g] = shards[g].batch.embeddings;

    std::vector<std::vector<GroupLayerState>> state(n_layers, std::vector<GroupLayerState>(groups));
    std::vector<Top1Stats> global_top1(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const auto& layer = model_.layers[l];
        const std::size_t k = activated_experts_at(static_cast<std::ptrdiff_t>(l), progress, cfg_.sparsity);
        std::vector<LoadStats> local(groups);
        std::vector<Top1Stats> local_top1(groups);
        for (std::size_t g = 0; g < groups; ++g) {
            TokenBatch in{layer_input(task_, l, residual[g], step, g * per)};
            state[l][g].fwd = moe_forward(in, layer, strategy, k, gates);
            local[g] = state[l][g].fwd.stats;
            if (strategy.kind == BalanceKind::top1_lbl) {
                state[l][g].top1_probs = softmax_probs(state[l][g].fwd.decision.logits, strategy.tau);
                local_top1[g] = top1_stats(state[l][g].top1_probs);
            }
        }
        LoadStats global = global_batch_reduce(local);

        double bal = 0.0;
        switch (strategy.kind) {
            case BalanceKind::lbl_micro_batch:
                for (const auto& s : local) bal += conventional_lbl(s);
                bal /= static_cast<double>(groups);
                break;
            case BalanceKind::lbl_global_batch:
                if (cfg_.sync_probs) {
                    bal = conventional_lbl(global);
                } else {
                    for (const auto& s : local) {
                        LoadStats mixed = s;
                        mixed.fractions = global.fractions;
                        bal += conventional_lbl(mixed);
                    }
                    bal /= static_cast<double>(groups);
                }
                break;
            case BalanceKind::top1_lbl:
                global_top1[l] = reduce_top1(local_top1);
                bal = top1_lbl(global_top1[l]);
                break;
            default: break;
        }
        out.balance_losses.push_back(bal);

        LayerStepMetrics lm;
        lm.active_k = k;
        lm.assignments = std::accumulate(global.counts.begin(), global.counts.end(), std::int64_t{0});
        const auto ext = max_min_deviation(global.counts);
        lm.max_dev = ext.max_dev;
        lm.min_dev = ext.min_dev;
        lm.bias_norm = max_abs(layer.router.expert_bias);
        out.record.layers.push_back(lm);

        // Concatenated decision across groups.
        RoutingDecision cat;
        cat.top_k = k;
        cat.renormalized = state[l][0].fwd.decision.renormalized;
        cat.logits = Matrix(batch_size, n_e);
        cat.probs = Matrix(batch_size, n_e);
        for (std::size_t g = 0; g < groups; ++g) {
            const auto& dec = state[l][g].fwd.decision;
            cat.assignments.insert(cat.assignments.end(), dec.assignments.begin(), dec.assignments.end());
            cat.gate_values.insert(cat.gate_values.end(), dec.gate_values.begin(), dec.gate_values.end());
            std::copy(dec.logits.values().begin(), dec.logits.values().end(),
                      cat.logits.data() + g * per * n_e);
            std::copy(dec.probs.values().begin(), dec.probs.values().end(),
                      cat.probs.data() + g * per * n_e);
        }
        out.decisions.push_back(std::move(cat));
        out.global_stats.push_back(std::move(global));

        for (std::size_t g = 0; g < groups; ++g) {
            auto& h = residual[g].values();
            const auto& y = state[l][g].fwd.outputs.values();
            for (std::size_t i = 0; i < h.size(); ++i) h[i] += y[i];
        }
    }

    // Task loss: mean squared error to the per-token targets, summed in token order.
    double sq = 0.0;
    std::vector<Matrix> upstream(groups);
    const double scale = 2.0 / (static_cast<double>(batch_size) * d);
    for (std::size_t g = 0; g < groups; ++g) {
        upstream[g] = Matrix(per, lab.hidden_size);
        for (std::size_t j = 0; j < per; ++j)
            for (std::size_t k = 0; k < lab.hidden_size; ++k) {
                const double diff = residual[g](j, k) - sb.targets(g * per + j, k);
                sq += diff * diff;
                upstream[g](j, k) = scale * diff;
            }
    }
    out.record.task_loss = sq / (static_cast<double>(batch_size) * d);
    out.record.balance_loss =
        std::accumulate(out.balance_losses.begin(), out.balance_losses.end(), 0.0) /
        static_cast<double>(n_layers);
    if (!std::isfinite(out.record.task_loss) || !std::isfinite(out.record.balance_loss))
        throw std::runtime_error("non-finite loss");

    if (!train) return out;

    for (std::size_t li = n_layers; li-- > 0;) {
        const auto& layer = model_.layers[li];
        const double s = task_.difficulty(li);
        const auto& global = out.global_stats[li];
        for (std::size_t g = 0; g < groups; ++g) {
            const auto& fwd = state[li][g].fwd;
            Matrix bg;
            switch (strategy.kind) {
                case BalanceKind::lbl_micro_batch:
                    bg = conventional_lbl_grad(fwd.decision.probs, fwd.stats.fractions, per, 1.0);
                    for (double& v : bg.values()) v *= strategy.alpha / static_cast<double>(groups);
                    break;
                case BalanceKind::lbl_global_batch:
                    bg = conventional_lbl_grad(fwd.decision.probs, global.fractions, batch_size, 1.0);
                    for (double& v : bg.values()) v *= strategy.alpha;
                    break;
                case BalanceKind::top1_lbl:
                    bg = top1_lbl_grad(state[li][g].top1_probs, global_top1[li], strategy.tau);
                    for (double& v : bg.values()) v *= strategy.alpha;
                    break;
                default: break;
            }
            const Matrix du = moe_backward(upstream[g], fwd, layer, (*grads)[li],
                                           bg.empty() ? nullptr : &bg);
            auto& up = upstream[g].values();
            for (std::size_t i = 0; i < up.size(); ++i) up[i] += s * du.values()[i];
        }
    }
    return out;
}

StepOutcome Experiment::evaluate(std::int64_t step) const {
    return forward_backward(step, false, nullptr);
}

StepOutcome Experiment::step() {
    if (next_step_ >= cfg_.steps) throw ConfigError("experiment already finished");
    const std::int64_t t = next_step_;
    try {
        std::vector<LayerGrads> grads;
        for (const auto& l : model_.layers) grads.push_back(zero_grads(l));
        StepOutcome out = forward_backward(t, true, &grads);

        if (cfg_.strategy == BalanceKind::loss_free)
            for (std::size_t l = 0; l < model_.layers.size(); ++l) {
                auto& b = model_.layers[l].router.expert_bias;
                b = bias_update(b, out.global_stats[l].counts, cfg_.lab.bias_step);
            }

        std::vector<const Matrix*> gp;
        for (const auto& g : grads) {
            gp.push_back(&g.gate_weights);
            for (const auto& e : g.experts) {
                gp.push_back(&e.w1);
                gp.push_back(&e.w3);
                gp.push_back(&e.w2);
            }
        }
        const auto params = parameters();
        adamw_step(params, gp, opt_, out.record.lr);

        record_.append(out.record);
        if (t % cfg_.snapshot_every == 0 || t == cfg_.steps - 1) take_snapshot(out, t);
        next_step_ = t + 1;
        return out;
    } catch (const ConfigError& e) {
        throw ConfigError("step " + std::to_string(t) + ": " + e.what());
    } catch (const std::exception& e) {
        throw std::runtime_error("step " + std::to_string(t) + ": " + e.what());
    }
}

void Experiment::take_snapshot(const StepOutcome& out, std::int64_t step) {
    for (auto l : record_.tracked_layers()) {
        const auto& s = out.global_stats[l];
        record_.add_snapshot({step, l, s.counts, s.fractions, s.mean_probs});
    }
}

void Experiment::run() {
    if (cfg_.steps == 0 && record_.snapshots().empty()) {
        take_snapshot(evaluate(0), 0);
        return;
    }
    while (!finished()) step();
}

RunRecord run_experiment(const RunConfig& cfg) {
    RunConfig full = cfg;
    full.stop_after = 0;
    Experiment e(full);
    e.run();
    return e.record();
}

// ----------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put(std::ostream& o, T v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw ConfigError("checkpoint truncated");
    return v;
}

void put_tensor(std::ostream& o, const std::string& name, std::size_t rows, std::size_t cols,
                const double* data) {
    put<std::uint32_t>(o, static_cast<std::uint32_t>(name.size()));
    o.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint64_t>(o, rows);
    put<std::uint64_t>(o, cols);
    o.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(rows * cols * sizeof(double)));
}

nlohmann::json record_to_json(const RunRecord& r) {
    nlohmann::json j;
    j["run_id"] = r.run_id();
    j["num_layers"] = r.num_layers();
    j["num_experts"] = r.num_experts();
    j["tracked"] = r.tracked_layers();
    auto& steps = j["steps"] = nlohmann::json::array();
    for (const auto& s : r.steps()) {
        nlohmann::json layers = nlohmann::json::array();
        for (const auto& l : s.layers)
            layers.push_back({l.active_k, l.assignments, l.max_dev, l.min_dev, l.bias_norm});
        steps.push_back({s.step, s.progress, s.lr, s.batch_size, s.task_loss, s.balance_loss, layers});
    }
    auto& snaps = j["snapshots"] = nlohmann::json::array();
    for (const auto& s : r.snapshots())
        snaps.push_back({s.step, s.layer, s.counts, s.fractions, s.mean_probs});
    return j;
}

RunRecord record_from_json(const nlohmann::json& j) {
    RunRecord r(j.at("run_id").get<std::string>(), j.at("num_layers").get<std::size_t>(),
                j.at("num_experts").get<std::size_t>(),
                j.at("tracked").get<std::vector<std::size_t>>());
    for (const auto& s : j.at("steps")) {
        StepRecord rec{s[0].get<std::int64_t>(), s[1].get<double>(), s[2].get<double>(),
                       s[3].get<std::int64_t>(), s[4].get<double>(), s[5].get<double>(), {}};
        for (const auto& l : s[6])
            rec.layers.push_back({l[0].get<std::size_t>(), l[1].get<std::int64_t>(),
                                  l[2].get<double>(), l[3].get<double>(), l[4].get<double>()});
        r.append(std::move(rec));
    }
    for (const auto& s : j.at("snapshots"))
        r.add_snapshot({s[0].get<std::int64_t>(), s[1].get<std::size_t>(),
                        s[2].get<std::vector<std::int64_t>>(), s[3].get<std::vector<double>>(),
                        s[4].get<std::vector<double>>()});
    return r;
}

}  // namespace

void Experiment::save_checkpoint(const std::filesystem::path& path) const {
    nlohmann::json meta;
    meta["num_layers"] = cfg_.lab.num_layers;
    meta["num_experts"] = cfg_.lab.num_experts;
    meta["hidden_size"] = cfg_.lab.hidden_size;
    meta["expert_intermediate_size"] = cfg_.lab.expert_intermediate_size;
    meta["seed"] = cfg_.lab.seed;
    meta["strategy"] = to_string(cfg_.strategy);
    meta["next_step"] = next_step_;
    meta["adam_step"] = opt_.step;
    meta["record"] = record_to_json(record_);
    const std::string text = meta.dump();

    std::ofstream o(path, std::ios::binary);
    if (!o) throw std::runtime_error("cannot write " + path.string());
    o.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(o, kCheckpointVersion);
    put<std::uint64_t>(o, text.size());
    o.write(text.data(), static_cast<std::streamsize>(text.size()));

    std::vector<std::pair<std::string, const Matrix*>> tensors;
    std::vector<Matrix> biases;
    biases.reserve(model_.layers.size());
    for (const auto& l : model_.layers)
        biases.emplace_back(1, l.router.expert_bias.size(), l.router.expert_bias);
    for (std::size_t li = 0; li < model_.layers.size(); ++li) {
        const auto& l = model_.layers[li];
        const std::string p = "layer" + std::to_string(li) + ".";
        tensors.emplace_back(p + "router.weight", &l.router.gate_weights);
        tensors.emplace_back(p + "router.bias", &biases[li]);
        for (std::size_t e = 0; e < l.experts.size(); ++e) {
            const std::string q = p + "expert" + std::to_string(e) + ".";
            tensors.emplace_back(q + "w1", &l.experts[e].w1);
            tensors.emplace_back(q + "w3", &l.experts[e].w3);
            tensors.emplace_back(q + "w2", &l.experts[e].w2);
        }
    }
    for (std::size_t i = 0; i < opt_.first_moment.size(); ++i) {
        tensors.emplace_back("adam.m." + std::to_string(i), &opt_.first_moment[i]);
        tensors.emplace_back("adam.v." + std::to_string(i), &opt_.second_moment[i]);
    }
    put<std::uint64_t>(o, tensors.size());
    for (const auto& [name, m] : tensors) put_tensor(o, name, m->rows(), m->cols(), m->data());
    if (!o) throw std::runtime_error("write failed for " + path.string());
}

Experiment Experiment::load_checkpoint(const std::filesystem::path& path, RunConfig cfg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw ConfigError("not a moelab checkpoint: " + path.string());
    const auto version = get<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    const auto len = get<std::uint64_t>(in);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw ConfigError("checkpoint truncated");
    const auto meta = nlohmann::json::parse(text);

    auto expect = [&](const char* key, std::size_t want) {
        const auto got = meta.at(key).get<std::size_t>();
        if (got != want)
            throw ConfigError(std::string("checkpoint ") + key + " = " + std::to_string(got) +
                              " does not match configured " + std::to_string(want));
    };
    expect("num_layers", cfg.lab.num_layers);
    expect("num_experts", cfg.lab.num_experts);
    expect("hidden_size", cfg.lab.hidden_size);
    expect("expert_intermediate_size", cfg.lab.expert_intermediate_size);

    Experiment e(std::move(cfg));
    e.next_step_ = meta.at("next_step").get<std::int64_t>();
    e.opt_.step = meta.at("adam_step").get<std::int64_t>();
    e.record_ = record_from_json(meta.at("record"));

    std::vector<std::pair<std::string, Matrix*>> slots;
    std::vector<Matrix> biases(e.model_.layers.size());
    for (std::size_t li = 0; li < e.model_.layers.size(); ++li) {
        auto& l = e.model_.layers[li];
        const std::string p = "layer" + std::to_string(li) + ".";
        biases[li] = Matrix(1, l.router.expert_bias.size());
        slots.emplace_back(p + "router.weight", &l.router.gate_weights);
        slots.emplace_back(p + "router.bias", &biases[li]);
        for (std::size_t x = 0; x < l.experts.size(); ++x) {
            const std::string q = p + "expert" + std::to_string(x) + ".";
            slots.emplace_back(q + "w1", &l.experts[x].w1);
            slots.emplace_back(q + "w3", &l.experts[x].w3);
            slots.emplace_back(q + "w2", &l.experts[x].w2);
        }
    }
    for (std::size_t i = 0; i < e.opt_.first_moment.size(); ++i) {
        slots.emplace_back("adam.m." + std::to_string(i), &e.opt_.first_moment[i]);
        slots.emplace_back("adam.v." + std::to_string(i), &e.opt_.second_moment[i]);
    }
    const auto count = get<std::uint64_t>(in);
    if (count != slots.size())
        throw ConfigError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                          std::to_string(slots.size()));
    for (const auto& [want, m] : slots) {
        const auto nlen = get<std::uint32_t>(in);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        const auto rows = get<std::uint64_t>(in);
        const auto cols = get<std::uint64_t>(in);
        if (!in || name != want) throw ConfigError("checkpoint tensor order mismatch at " + want);
        if (rows != m->rows() || cols != m->cols())
            throw ConfigError("checkpoint tensor " + name + " has shape " + std::to_string(rows) +
                              "x" + std::to_string(cols));
        in.read(reinterpret_cast<char*>(m->data()),
                static_cast<std::streamsize>(rows * cols * sizeof(double)));
        if (!in) throw ConfigError("checkpoint truncated");
    }
    for (std::size_t li = 0; li < e.model_.layers.size(); ++li)
        e.model_.layers[li].router.expert_bias = biases[li].values();
    return e;
}

}  // namespace moelab
