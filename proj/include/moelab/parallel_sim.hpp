// SPDX-License-Identifier: Apache-2.0
//
// Sequential simulation of data-parallel groups and the expert-parallel
// traffic model.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moelab/core.hpp"

namespace moelab {

struct GroupShard {
    std::size_t group_id = 0;
    std::size_t first_token = 0;  // offset into the global batch
    TokenBatch batch;
    LoadStats stats;
};

/// Contiguous equal split preserving token order. Throws ConfigError when
/// the token count is not divisible by `groups`.
std::vector<GroupShard> shard_batch(const TokenBatch& batch, std::size_t groups);

/// Element-wise mean, summed in ascending group order.
std::vector<double> all_reduce_mean(std::span<const std::vector<double>> vectors);

/// Bytes exchanged per expert-parallel dispatch: mbs * K * d * bytes_per_elem.
std::uint64_t ep_traffic(std::uint64_t micro_batch, std::uint64_t top_k, std::uint64_t hidden,
                         std::uint64_t bytes_per_elem);

}  // namespace moelab
