// SPDX-License-Identifier: Apache-2.0

#include "moelab/parallel_sim.hpp"

#include <algorithm>
#include <string>

namespace moelab {

std::vector<GroupShard> shard_batch(const TokenBatch& batch, std::size_t groups) {
    if (groups == 0) throw ConfigError("shard_batch: group count must be positive");
    const std::size_t n = batch.num_tokens();
    if (n % groups != 0)
        throw ConfigError("shard_batch: " + std::to_string(n) + " tokens not divisible by " +
                          std::to_string(groups) + " groups");
    const std::size_t per = n / groups;
    const std::size_t d = batch.hidden_size();
    std::vector<GroupShard> shards(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        shards[g].group_id = g;
        shards[g].first_token = g * per;
        Matrix m(per, d);
        const auto* src = batch.embeddings.data() + g * per * d;
        std::copy(src, src + per * d, m.data());
        shards[g].batch.embeddings = std::move(m);
    }
    return shards;
}

std::vector<double> all_reduce_mean(std::span<const std::vector<double>> vectors) {
    if (vectors.empty()) throw ConfigError("all_reduce_mean: no inputs");
    const std::size_t len = vectors.front().size();
    std::vector<double> acc(len, 0.0);
    for (const auto& v : vectors) {
        if (v.size() != len) throw ShapeError("all_reduce_mean: vector lengths differ");
        for (std::size_t i = 0; i < len; ++i) acc[i] += v[i];
    }
    const double g = static_cast<double>(vectors.size());
    for (double& a : acc) a /= g;
    return acc;
}

std::uint64_t ep_traffic(std::uint64_t micro_batch, std::uint64_t top_k, std::uint64_t hidden,
                         std::uint64_t bytes_per_elem) {
    if (micro_batch == 0 || top_k == 0 || hidden == 0 || bytes_per_elem == 0)
        throw ConfigError("ep_traffic: all arguments must be positive");
    return micro_batch * top_k * hidden * bytes_per_elem;
}

}  // namespace moelab
