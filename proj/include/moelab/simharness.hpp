// SPDX-License-Identifier: Apache-2.0
//
// Synthetic routing task, AdamW, and the experiment loop that stacks MoE
// layers, simulates data-parallel groups and logs a RunRecord.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moelab/balance.hpp"
#include "moelab/core.hpp"
#include "moelab/metrics.hpp"
#include "moelab/moe_layer.hpp"
#include "moelab/schedule.hpp"

namespace moelab {

// ---------------------------------------------------------------- task

struct TaskConfig {
    std::size_t num_clusters = 16;
    /// Token noise is N(0, 1/d) per coordinate scaled by 1/separability.
    double separability = 8.0;
    double center_scale = 1.0;
    /// Norm of a shared offset added to every center.
    double common_scale = 0.0;
    double target_scale = 4.0;
    /// Scale of a per-cluster linear map applied to the token's offset from
    /// its center and added to the target; nonzero values make an expert
    /// that serves several clusters measurably worse.
    double map_scale = 4.0;
    /// Per-layer separability of the layer input: the cluster-specific part
    /// of the residual stream is shrunk by this factor before the layer sees
    /// it. Missing entries default to 1.
    std::vector<double> layer_difficulty{0.05};
    /// Norm of the per-token distractor mixed into a blurred layer input with
    /// weight sqrt(1 - s^2), so blurring removes cluster signal without
    /// shrinking the input.
    double distractor_scale = 0.0;
};

struct SyntheticTask {
    std::size_t num_clusters = 0;
    Matrix centers;  // C x d
    Matrix targets;  // C x d, added to the token to form its regression target
    std::vector<Matrix> maps;  // C matrices d x d, empty when map_scale is 0
    std::vector<double> anchor;  // mean of the centers
    double separability = 1.0;
    std::vector<double> layer_difficulty;  // one per layer
    double distractor_scale = 0.0;
    std::uint64_t seed = 0;

    double difficulty(std::size_t layer) const noexcept {
        return layer < layer_difficulty.size() ? layer_difficulty[layer] : 1.0;
    }
};

SyntheticTask make_task(const LabConfig& cfg, const TaskConfig& task, std::uint64_t seed);

struct SampledBatch {
    TokenBatch tokens;
    std::vector<std::size_t> clusters;  // per token
    Matrix targets;                     // per token
};

/// Tokens are laid out in equal contiguous cluster blocks; noise is keyed by
/// (seed, step, token index), so the batch is independent of grouping.
/// Target = x + t_c + M_c (x - center_c). Separability 0 drops the centers
/// and leaves unit-scale noise.
SampledBatch sample_batch(const SyntheticTask& task, std::int64_t step, std::size_t batch_size);

/// anchor + s * (h - anchor) + sqrt(1 - s^2) * distractor, with s the layer
/// difficulty. The distractor is keyed by (seed, step, layer, global token
/// index) so group sharding does not change it.
Matrix layer_input(const SyntheticTask& task, std::size_t layer, const Matrix& residual,
                   std::int64_t step = 0, std::size_t first_token = 0);

/// Index of the nearest center for each token.
std::vector<std::size_t> nearest_center(const SyntheticTask& task, const Matrix& tokens);

// ----------------------------------------------------------- optimizer

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-9;
    double weight_decay = 0.1;
    double grad_clip = 1.0;  // global L2 norm; <= 0 disables
};

struct OptimizerState {
    AdamWConfig config;
    std::int64_t step = 0;
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;
};

OptimizerState make_optimizer(std::span<const Matrix* const> params, const AdamWConfig& cfg = {});

/// Global-norm clip, then decoupled weight decay and the bias-corrected Adam
/// update. Returns the pre-clip gradient norm. Throws ConfigError on
/// non-finite gradients or mismatched shapes.
double adamw_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                  OptimizerState& state, double lr);

// ----------------------------------------------------------- experiment

struct RunConfig {
    LabConfig lab;
    TaskConfig task;
    BalanceKind strategy = BalanceKind::lbl_global_batch;
    /// Average p over groups for the global-batch LBL (f is always reduced).
    bool sync_probs = true;
    SparsitySchedule sparsity = SparsitySchedule::constant(1);
    /// total_steps is overwritten with `steps`.
    LrSchedule lr{100, 3e-3, 0.6, 3e-3 * 1.6 / 2.6, 0.3, 3e-4, 2000};
    BatchRamp batch{256, 256, 0.4, 64};
    AdamWConfig optimizer;
    std::int64_t steps = 2000;
    /// Stop early (checkpoint-able) after this many steps; 0 runs to the end.
    std::int64_t stop_after = 0;
    double init_std = 0.02;
    std::int64_t snapshot_every = 50;
    /// Empty means {0, L/2, L-1}.
    std::vector<std::size_t> tracked_layers;
    std::string run_id = "run";
    std::string out_dir = "runs/run";

    BalanceStrategy balance() const {
        return {strategy, lab.lbl_coefficient, lab.temperature, lab.bias_step};
    }
    std::vector<std::size_t> resolved_tracked_layers() const;
};

/// Throws ConfigError naming the first invalid field.
void validate_run_config(const RunConfig& cfg);

struct StepPlan {
    std::vector<std::int64_t> batch_sizes;
    std::vector<double> progress;  // consumed-token fraction before each step
};

/// Batch sizes follow the ramp over step fraction; progress is the consumed
/// token fraction of the planned total.
StepPlan plan_steps(const RunConfig& cfg);

struct Model {
    std::vector<MoELayer> layers;
};

/// Everything a single training step produced, for tests and diagnostics.
struct StepOutcome {
    StepRecord record;
    std::vector<LoadStats> global_stats;      // per layer
    std::vector<RoutingDecision> decisions;   // per layer, groups concatenated
    std::vector<double> balance_losses;       // per layer, unscaled
};

class Experiment {
public:
    explicit Experiment(RunConfig cfg);

    /// One optimizer step; appends to the record.
    StepOutcome step();
    /// Runs until `steps` (or `stop_after`) is reached.
    void run();
    /// Forward-only statistics on the batch of `step` (no update).
    StepOutcome evaluate(std::int64_t step) const;

    bool finished() const noexcept;
    std::int64_t next_step() const noexcept { return next_step_; }
    const RunConfig& config() const noexcept { return cfg_; }
    const Model& model() const noexcept { return model_; }
    Model& model() noexcept { return model_; }
    const OptimizerState& optimizer() const noexcept { return opt_; }
    const RunRecord& record() const noexcept { return record_; }
    const SyntheticTask& task() const noexcept { return task_; }
    const StepPlan& plan() const noexcept { return plan_; }

    void save_checkpoint(const std::filesystem::path& path) const;
    /// Restores parameters, optimizer moments, step counter and record.
    /// Throws ConfigError on version or shape mismatch with `cfg`.
    static Experiment load_checkpoint(const std::filesystem::path& path, RunConfig cfg);

private:
    StepOutcome forward_backward(std::int64_t step, bool train, std::vector<LayerGrads>* grads) const;
    void take_snapshot(const StepOutcome& out, std::int64_t step);
    std::vector<Matrix*> parameters();

    RunConfig cfg_;
    SyntheticTask task_;
    StepPlan plan_;
    Model model_;
    OptimizerState opt_;
    RunRecord record_;
    std::int64_t next_step_ = 0;
};

/// Runs a configuration from scratch to completion.
RunRecord run_experiment(const RunConfig& cfg);

}  // namespace moelab
