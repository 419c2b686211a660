// SPDX-License-Identifier: Apache-2.0
//
// Shared domain types for the MoE routing lab: dense matrices, lab
// configuration, token batches and per-expert load statistics.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace moelab {

/// Invalid configuration or argument supplied by the caller.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Operands whose dimensions do not agree.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    void fill(double v);
    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

struct LabConfig {
    std::size_t num_experts = 16;
    std::size_t top_k = 1;
    std::size_t hidden_size = 32;
    std::size_t expert_intermediate_size = 16;
    std::size_t num_layers = 4;
    std::size_t num_parallel_groups = 4;
    std::uint64_t seed = 0;
    double lbl_coefficient = 1e-3;
    double temperature = 1.0;  // top-1 LBL softmax temperature
    double bias_step = 1e-3;
    /// Combine weights for K > 1: renormalize over the selected experts.
    bool renormalize_gates = true;
    /// Router logits computed in 32-bit arithmetic.
    bool fp32_gating = false;

    /// 96 experts, top-1, d = 1536, m = 768, 56 layers.
    static LabConfig reference_scale();
};

/// Returns `cfg` unchanged, or throws ConfigError naming the first violated invariant.
LabConfig validate_config(const LabConfig& cfg);

struct TokenBatch {
    Matrix embeddings;  // N_B x d

    std::size_t num_tokens() const noexcept { return embeddings.rows(); }
    std::size_t hidden_size() const noexcept { return embeddings.cols(); }
};

/// Throws ShapeError if the batch is empty or has non-finite entries.
void validate_batch(const TokenBatch& batch);

enum class StatScope { micro_batch, global_batch };

const char* to_string(StatScope s);

struct LoadStats {
    std::vector<double> fractions;        // f_i
    std::vector<double> mean_probs;       // p_i
    std::vector<std::int64_t> counts;     // (token, slot) assignments per expert
    std::size_t num_tokens = 0;
    std::size_t top_k = 1;
    StatScope scope = StatScope::micro_batch;

    std::size_t num_experts() const noexcept { return counts.size(); }
};

/// Checks Σf = K, Σp = 1 (within `tol`) and Σcounts = K·N_B.
bool load_stats_consistent(const LoadStats& s, double tol = 1e-9);

}  // namespace moelab
