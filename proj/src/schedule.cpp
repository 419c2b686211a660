// SPDX-License-Identifier: Apache-2.0

#include "moelab/schedule.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace moelab {

namespace {

double cosine_between(double from, double to, double x) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

}  // namespace

void validate_schedule(const SparsitySchedule& s, std::size_t num_experts) {
    if (!(s.switch_fraction >= 0.0 && s.switch_fraction <= 1.0))
        throw ConfigError("switch_fraction must lie in [0, 1]");
    if (s.default_count < 1 || s.default_count > num_experts)
        throw ConfigError("default_count must lie in [1, num_experts]");
    for (std::size_t i = 0; i < s.early_counts.size(); ++i)
        if (s.early_counts[i] < 1 || s.early_counts[i] > num_experts)
            throw ConfigError("early_counts[" + std::to_string(i) +
                              "] must lie in [1, num_experts]");
}

std::size_t activated_experts_at(std::ptrdiff_t layer, double progress,
                                 const SparsitySchedule& s) {
    if (layer < 0) throw ConfigError("activated_experts_at: negative layer");
    if (!(progress >= 0.0 && progress <= 1.0))
        throw ConfigError("activated_experts_at: progress outside [0, 1]");
    const auto l = static_cast<std::size_t>(layer);
    if (progress < s.switch_fraction && l < s.early_counts.size()) return s.early_counts[l];
    return s.default_count;
}

void validate_schedule(const LrSchedule& s) {
    if (s.warmup_steps < 0) throw ConfigError("warmup_steps must be nonnegative");
    if (s.total_steps < 1) throw ConfigError("total_steps must be positive");
    if (!(s.peak_lr > 0 && s.mid_lr > 0 && s.final_lr > 0))
        throw ConfigError("learning rates must be positive");
    if (!(s.stable_fraction >= 0 && s.mid_fraction >= 0 && s.stable_fraction + s.mid_fraction <= 1))
        throw ConfigError("stable_fraction + mid_fraction must lie in [0, 1]");
}

double learning_rate_at_progress(std::int64_t step, double progress, const LrSchedule& s) {
    if (step < 0 || step > s.total_steps)
        throw ConfigError("learning_rate_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(s.total_steps) + "]");
    if (step < s.warmup_steps)
        return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const double stable_end = s.stable_fraction;
    const double mid_end = s.stable_fraction + s.mid_fraction;
    if (progress <= stable_end) return s.peak_lr;
    if (progress <= mid_end) {
        const double x = s.mid_fraction > 0 ? (progress - stable_end) / s.mid_fraction : 1.0;
        return cosine_between(s.peak_lr, s.mid_lr, x);
    }
    const double rest = 1.0 - mid_end;
    const double x = rest > 0 ? std::min(1.0, (progress - mid_end) / rest) : 1.0;
    return cosine_between(s.mid_lr, s.final_lr, x);
}

double learning_rate_at(std::int64_t step, const LrSchedule& s) {
    return learning_rate_at_progress(
        step, static_cast<double>(step) / static_cast<double>(s.total_steps), s);
}

void validate_ramp(const BatchRamp& r) {
    if (r.start_size < 1 || r.end_size < 1) throw ConfigError("batch sizes must be positive");
    if (r.granularity < 1) throw ConfigError("batch granularity must be positive");
    if (!(r.ramp_fraction >= 0 && r.ramp_fraction <= 1))
        throw ConfigError("ramp_fraction must lie in [0, 1]");
}

std::int64_t batch_size_at(double progress, const BatchRamp& r) {
    double size = static_cast<double>(r.end_size);
    if (progress < r.ramp_fraction && r.ramp_fraction > 0)
        size = static_cast<double>(r.start_size) +
               static_cast<double>(r.end_size - r.start_size) * progress / r.ramp_fraction;
    const double g = static_cast<double>(r.granularity);
    const auto units = static_cast<std::int64_t>(std::llround(size / g));
    return std::max<std::int64_t>(1, units) * r.granularity;
}

std::uint64_t activated_params(const LabConfig& cfg, const SparsitySchedule& s, double progress,
                               const ParamAccounting& acct) {
    const std::uint64_t per_expert =
        3ULL * static_cast<std::uint64_t>(cfg.hidden_size) * cfg.expert_intermediate_size;
    std::uint64_t total = acct.non_expert_params;
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
        total += activated_experts_at(static_cast<std::ptrdiff_t>(l), progress, s) * per_expert;
    return total;
}

}  // namespace moelab
