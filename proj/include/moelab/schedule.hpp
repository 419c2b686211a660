// SPDX-License-Identifier: Apache-2.0
//
// Training-progress schedules. "Progress" is the consumed-token fraction
// of the run, in [0, 1].

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "moelab/core.hpp"

namespace moelab {

/// Lower layers start with more activated experts, then every layer drops
/// to `default_count` once progress reaches `switch_fraction`.
struct SparsitySchedule {
    std::vector<std::size_t> early_counts{8, 8, 6, 6, 4, 4, 2, 2};
    std::size_t default_count = 1;
    double switch_fraction = 0.9;

    /// Target sparsity from the first step.
    static SparsitySchedule constant(std::size_t k) { return {{}, k, 0.0}; }
};

void validate_schedule(const SparsitySchedule& s, std::size_t num_experts);

/// early_counts[layer] while progress < switch_fraction, else default_count.
std::size_t activated_experts_at(std::ptrdiff_t layer, double progress,
                                 const SparsitySchedule& s);

/// Warmup-stable-decay: linear warmup to peak, constant until
/// stable_fraction, cosine to mid_lr over mid_fraction, cosine to final_lr
/// over the remainder.
struct LrSchedule {
    std::int64_t warmup_steps = 2000;
    double peak_lr = 2.6e-4;
    double stable_fraction = 0.6;  // includes warmup
    double mid_lr = 1.6e-4;
    double mid_fraction = 0.3;
    double final_lr = 2.6e-5;
    std::int64_t total_steps = 100000;
};

void validate_schedule(const LrSchedule& s);

/// Step-fraction phases: progress = step / total_steps.
double learning_rate_at(std::int64_t step, const LrSchedule& s);

/// Warmup counted in steps, later phases placed by token `progress`.
double learning_rate_at_progress(std::int64_t step, double progress, const LrSchedule& s);

struct BatchRamp {
    std::int64_t start_size = 1920;
    std::int64_t end_size = 7680;
    double ramp_fraction = 0.4;
    std::int64_t granularity = 1;
};

void validate_ramp(const BatchRamp& r);

/// Linear start -> end over ramp_fraction, rounded to the nearest multiple of
/// the granularity, then constant.
std::int64_t batch_size_at(double progress, const BatchRamp& r);

struct ParamAccounting {
    /// Activated non-expert parameters per token (attention, embeddings,
    /// routers). The default makes reference-scale totals reproduce the 0.50/0.65
    /// target-to-initial ratio.
    std::uint64_t non_expert_params = 179'306'496;
};

/// Activated parameters per token: sum over layers of K(layer) * 3 * d * m
/// plus the fixed non-expert term.
std::uint64_t activated_params(const LabConfig& cfg, const SparsitySchedule& s, double progress,
                               const ParamAccounting& acct = {});

}  // namespace moelab
