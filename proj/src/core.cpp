// SPDX-License-Identifier: Apache-2.0

#include "moelab/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moelab {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols)
        throw ShapeError("matrix data size does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

LabConfig LabConfig::reference_scale() {
    LabConfig c;
    c.num_experts = 96;
    c.top_k = 1;
    c.hidden_size = 1536;
    c.expert_intermediate_size = 768;
    c.num_layers = 56;
    return c;
}

LabConfig validate_config(const LabConfig& cfg) {
    if (cfg.num_experts < 1) throw ConfigError("num_experts must be at least 1");
    if (cfg.top_k < 1) throw ConfigError("top_k must be at least 1");
    if (cfg.top_k > cfg.num_experts) throw ConfigError("top_k exceeds num_experts");
    if (cfg.hidden_size < 1) throw ConfigError("hidden_size must be at least 1");
    if (cfg.expert_intermediate_size < 1)
        throw ConfigError("expert_intermediate_size must be at least 1");
    if (cfg.num_layers < 1) throw ConfigError("num_layers must be at least 1");
    if (cfg.num_parallel_groups < 1) throw ConfigError("num_parallel_groups must be at least 1");
    if (!std::isfinite(cfg.lbl_coefficient)) throw ConfigError("lbl_coefficient must be finite");
    if (cfg.lbl_coefficient < 0) throw ConfigError("lbl_coefficient must be nonnegative");
    if (!std::isfinite(cfg.temperature)) throw ConfigError("temperature must be finite");
    if (cfg.temperature <= 0) throw ConfigError("temperature must be positive");
    if (!std::isfinite(cfg.bias_step)) throw ConfigError("bias_step must be finite");
    if (cfg.bias_step < 0) throw ConfigError("bias_step must be nonnegative");
    return cfg;
}

void validate_batch(const TokenBatch& batch) {
    if (batch.num_tokens() < 1) throw ShapeError("token batch is empty");
    if (!batch.embeddings.all_finite()) throw ShapeError("token batch has non-finite entries");
}

const char* to_string(StatScope s) {
    return s == StatScope::micro_batch ? "micro_batch" : "global_batch";
}

bool load_stats_consistent(const LoadStats& s, double tol) {
    const std::size_t n = s.counts.size();
    if (s.fractions.size() != n || s.mean_probs.size() != n) return false;
    const double fsum = std::accumulate(s.fractions.begin(), s.fractions.end(), 0.0);
    const double psum = std::accumulate(s.mean_probs.begin(), s.mean_probs.end(), 0.0);
    const auto csum = std::accumulate(s.counts.begin(), s.counts.end(), std::int64_t{0});
    return std::abs(fsum - static_cast<double>(s.top_k)) <= tol && std::abs(psum - 1.0) <= tol &&
           csum == static_cast<std::int64_t>(s.top_k * s.num_tokens);
}

}  // namespace moelab
