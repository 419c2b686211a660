// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random numbers: every draw is a pure function of
// (seed, stream key, counter), so the sampling order of workers cannot
// change what a given token or parameter receives.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace moelab {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream_a = 0, std::uint64_t stream_b = 0,
               std::uint64_t stream_c = 0) noexcept
        : key_(splitmix64(splitmix64(splitmix64(seed) ^ (stream_a * 0xD1B54A32D192ED03ULL)) ^
                          (stream_b * 0xABC98388FB8FAC03ULL)) ^
               (stream_c * 0x8CB92BA72F3D8DD7ULL)) {}

    std::uint64_t at(std::uint64_t counter) const noexcept {
        return splitmix64(key_ ^ splitmix64(counter));
    }

    /// Uniform in (0, 1), never exactly 0.
    double uniform(std::uint64_t counter) const noexcept {
        return (static_cast<double>(at(counter) >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller on counters (2c, 2c+1).
    double normal(std::uint64_t counter) const noexcept {
        const double u1 = uniform(2 * counter);
        const double u2 = uniform(2 * counter + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t key() const noexcept { return key_; }

private:
    std::uint64_t key_;
};

}  // namespace moelab
