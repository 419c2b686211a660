// SPDX-License-Identifier: Apache-2.0
//
// Load-balance diagnostics and their CSV / SVG emission.
//
// metrics.csv columns, in order (floats printed with 9 significant digits):
//   step, progress, lr, batch_size, task_loss, balance_loss,
//   then for each layer l = 0..L-1:
//   L<l>_k, L<l>_assignments, L<l>_max_dev, L<l>_min_dev, L<l>_bias_norm
//
// snapshots.csv columns:
//   step, layer, expert, count, f, p

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/core.hpp"

namespace moelab {

/// (count_i - T/N_E) / (T/N_E) with T = sum of counts.
std::vector<double> relative_deviation(std::span<const std::int64_t> counts);

struct DeviationExtremes {
    double max_dev = 0.0;
    double min_dev = 0.0;
};

DeviationExtremes max_min_deviation(std::span<const std::int64_t> counts);
/// Extremes for every entry of a stats history.
std::vector<DeviationExtremes> max_min_deviation(std::span<const LoadStats> history);

struct LayerStepMetrics {
    std::size_t active_k = 1;
    std::int64_t assignments = 0;
    double max_dev = 0.0;
    double min_dev = 0.0;
    double bias_norm = 0.0;  // max |b_i|

    friend bool operator==(const LayerStepMetrics&, const LayerStepMetrics&) = default;
};

struct StepRecord {
    std::int64_t step = 0;
    double progress = 0.0;
    double lr = 0.0;
    std::int64_t batch_size = 0;
    double task_loss = 0.0;
    double balance_loss = 0.0;
    std::vector<LayerStepMetrics> layers;

    friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct Snapshot {
    std::int64_t step = 0;
    std::size_t layer = 0;
    std::vector<std::int64_t> counts;
    std::vector<double> fractions;
    std::vector<double> mean_probs;

    friend bool operator==(const Snapshot&, const Snapshot&) = default;
};

class RunRecord {
public:
    RunRecord() = default;
    RunRecord(std::string run_id, std::size_t num_layers, std::size_t num_experts,
              std::vector<std::size_t> tracked_layers);

    /// Throws ConfigError unless steps are strictly increasing and the layer
    /// count matches.
    void append(StepRecord rec);
    /// Throws ConfigError for a layer outside the tracked set.
    void add_snapshot(Snapshot snap);

    const std::string& run_id() const noexcept { return run_id_; }
    std::size_t num_layers() const noexcept { return num_layers_; }
    std::size_t num_experts() const noexcept { return num_experts_; }
    const std::vector<std::size_t>& tracked_layers() const noexcept { return tracked_; }
    const std::vector<StepRecord>& steps() const noexcept { return steps_; }
    const std::vector<Snapshot>& snapshots() const noexcept { return snapshots_; }

    friend bool operator==(const RunRecord&, const RunRecord&) = default;

private:
    std::string run_id_;
    std::size_t num_layers_ = 0;
    std::size_t num_experts_ = 0;
    std::vector<std::size_t> tracked_;
    std::vector<StepRecord> steps_;
    std::vector<Snapshot> snapshots_;
};

/// "%.9g" formatting used by every emitted file.
std::string format_real(double v);

std::vector<std::string> metrics_csv_header(std::size_t num_layers);
/// Writes metrics.csv content. Throws std::runtime_error on I/O failure.
void emit_csv(const RunRecord& record, const std::filesystem::path& path);
void emit_snapshots_csv(const RunRecord& record, const std::filesystem::path& path);

/// Parses a metrics.csv written by emit_csv (steps only, no snapshots).
RunRecord load_metrics_csv(const std::filesystem::path& path, const std::string& run_id);

/// Deviation-vs-step chart per tracked layer (needs at least two steps) and
/// f / p distribution charts at the last snapshot. Returns written files.
std::vector<std::filesystem::path> emit_plots(const RunRecord& record,
                                              const std::filesystem::path& out_dir);

/// One overlaid deviation chart per layer across runs.
std::vector<std::filesystem::path> emit_comparison_plots(std::span<const RunRecord> records,
                                                         std::span<const std::size_t> layers,
                                                         const std::filesystem::path& out_dir);

}  // namespace moelab
