// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "moelab/parallel_sim.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

TEST(ShardTest, SingleGroup) {
    std::mt19937_64 rng(1);
    const TokenBatch b{test::random_matrix(rng, 5, 3)};
    const auto s = shard_batch(b, 1);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0].batch.embeddings, b.embeddings);
    EXPECT_EQ(s[0].first_token, 0u);
}

TEST(ShardTest, ContiguousSplit) {
    Matrix m(8, 1);
    for (std::size_t j = 0; j < 8; ++j) m(j, 0) = static_cast<double>(j);
    const auto s = shard_batch(TokenBatch{m}, 2);
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[1].first_token, 4u);
    EXPECT_EQ(s[1].group_id, 1u);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(s[0].batch.embeddings(j, 0), static_cast<double>(j));
        EXPECT_EQ(s[1].batch.embeddings(j, 0), static_cast<double>(j + 4));
    }
}

TEST(ShardTest, Indivisible) {
    EXPECT_THROW(shard_batch(TokenBatch{Matrix(7, 2)}, 2), ConfigError);
    EXPECT_THROW(shard_batch(TokenBatch{Matrix(4, 2)}, 0), ConfigError);
}

TEST(AllReduceTest, Cases) {
    const std::vector<std::vector<double>> same{{1.5, -2}, {1.5, -2}, {1.5, -2}};
    EXPECT_EQ(all_reduce_mean(same), same[0]);
    const std::vector<std::vector<double>> opp{{1, 0}, {0, 1}};
    EXPECT_EQ(all_reduce_mean(opp), (std::vector<double>{0.5, 0.5}));
}

TEST(AllReduceTest, MatchesSerialSumBitForBit) {
    std::mt19937_64 rng(2);
    std::vector<std::vector<double>> v(4);
    for (auto& x : v) x = test::random_matrix(rng, 1, 9).values();
    std::vector<double> expect(9, 0.0);
    for (std::size_t i = 0; i < 9; ++i) {
        double s = 0.0;
        for (std::size_t g = 0; g < 4; ++g) s += v[g][i];
        expect[i] = s / 4.0;
    }
    EXPECT_EQ(all_reduce_mean(v), expect);
    v[2].pop_back();
    EXPECT_THROW(all_reduce_mean(v), ShapeError);
}

TEST(TrafficTest, Values) {
    EXPECT_EQ(ep_traffic(8, 1, 1536, 2), 24576u);
    EXPECT_EQ(ep_traffic(1, 1, 1, 4), 4u);
    EXPECT_THROW(ep_traffic(0, 1, 1, 2), ConfigError);
}

}  // namespace
}  // namespace moelab
