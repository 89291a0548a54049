/* Copyright 2026 The MoE Overlap Simulator Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <gtest/gtest.h>

#include <set>

#include "moesim/dependency_resolver.h"
#include "moesim/errors.h"
#include "moesim/random.h"
#include "moesim/schedule_mutation.h"
#include "oracles.h"

namespace moesim {
namespace {

std::vector<std::tuple<std::int64_t, std::int64_t, std::int64_t>> flatten(
    const std::vector<ExpertBlock>& blocks, std::int64_t rank, std::int64_t W) {
  std::vector<std::tuple<std::int64_t, std::int64_t, std::int64_t>> out;
  for (const auto& b : blocks) {
    for (const auto& ref : b.tokens) {
      out.emplace_back(b.expert, ((ref.source_rank - rank) % W + W) % W, ref.token);
    }
  }
  return out;
}

std::set<std::int64_t> remote_tokens(const Tile& t, std::int64_t rank) {
  std::set<std::int64_t> s;
  for (const auto& ref : t.tokens) {
    if (ref.source_rank != rank) s.insert(ref.token);
  }
  return s;
}

// Three experts on rank 0 of 2, every expert fed from both ranks.
RoutingTable three_expert_table() {
  const ModelConfig m{1, 6, 2, 8, 8, 2};
  return RoutingTable(m, ParallelSpec{1, 2},
                      {{0, 1}, {1, 2}, {0, 3}, {2, 4},    // rank 0 tokens
                       {0, 2}, {1, 5}, {2, 3}, {0, 1}});  // rank 1 tokens
}

TEST(SortTokensTest, SingleRankIsIdentity) {
  const ModelConfig m{1, 4, 2, 8, 8, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 1}, WorkloadSpec{40, 2, 0.0});
  for (const auto& b : sort_tokens_by_source(rt, 0)) {
    for (std::size_t i = 1; i < b.tokens.size(); ++i) {
      EXPECT_LT(b.tokens[i - 1].token, b.tokens[i].token);
    }
  }
}

TEST(SortTokensTest, LocalTokensLeadEveryExpertBlock) {
  const auto rt = three_expert_table();
  const auto blocks = sort_tokens_by_source(rt, 0);
  ASSERT_EQ(blocks.size(), 3u);
  for (const auto& b : blocks) {
    bool remote_seen = false;
    bool has_local = false;
    bool has_remote = false;
    for (const auto& ref : b.tokens) {
      if (ref.source_rank == 0) {
        EXPECT_FALSE(remote_seen) << "expert " << b.expert;
        has_local = true;
      } else {
        remote_seen = has_remote = true;
      }
    }
    EXPECT_TRUE(has_local && has_remote) << "expert " << b.expert;
  }
}

TEST(SortTokensTest, MatchesBruteForceEnumeration) {
  const ModelConfig m{1, 2, 1, 4, 4, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 2}, WorkloadSpec{8, 7, 0.0});
  for (std::int64_t rank = 0; rank < 2; ++rank) {
    EXPECT_EQ(flatten(sort_tokens_by_source(rt, rank), rank, 2),
              oracle::layout_triples(rt, rank));
  }
}

TEST(SortTokensTest, RingOrderOnLargerWorlds) {
  const ModelConfig m{1, 8, 3, 4, 8, 2};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto rt = build_routing(m, ParallelSpec{2, 4}, WorkloadSpec{57, seed, 0.05});
    for (std::int64_t rank = 0; rank < 8; ++rank) {
      EXPECT_EQ(flatten(sort_tokens_by_source(rt, rank), rank, 8),
                oracle::layout_triples(rt, rank));
    }
  }
}

TEST(SortTokensTest, RankOutOfRange) {
  const auto rt = three_expert_table();
  EXPECT_THROW(sort_tokens_by_source(rt, 2), ConfigError);
  EXPECT_THROW(sort_tokens_by_source(rt, -1), ConfigError);
}

TEST(ResolveLayer0Test, AllLocalIsExpertRowOrder) {
  const ModelConfig m{1, 4, 2, 8, 8, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 1}, WorkloadSpec{50, 1, 0.0});
  const auto s = resolve_layer0(rt, 0, SharedTensorMeta::layer0(m, {1, 1}, 50, 8));
  for (std::size_t i = 0; i < s.tiles.size(); ++i) {
    EXPECT_EQ(s.tiles[i].remote_deps(0), 0);
    if (i > 0) {
      EXPECT_LE(std::make_pair(s.tiles[i - 1].expert, s.tiles[i - 1].row_begin),
                std::make_pair(s.tiles[i].expert, s.tiles[i].row_begin));
    }
  }
  EXPECT_TRUE(validate_schedule(s, rt, 0).empty());
}

TEST(ResolveLayer0Test, HandEnumeratedTwoTiles) {
  // One expert replicated over two TP ranks; tokens 0-3 start on rank 0.
  const ModelConfig m{1, 1, 1, 4, 4, 2};
  const RoutingTable rt(m, ParallelSpec{2, 1}, {{0}, {0}, {0}, {0}, {0}, {0}, {0}, {0}});
  const auto s = resolve_layer0(rt, 0, SharedTensorMeta::layer0(m, {2, 1}, 8, 4));
  ASSERT_EQ(s.tiles.size(), 2u);
  EXPECT_TRUE(remote_tokens(s.tiles[0], 0).empty());
  EXPECT_EQ(remote_tokens(s.tiles[1], 0), (std::set<std::int64_t>{4, 5, 6, 7}));
  for (const auto& ref : s.tiles[1].tokens) EXPECT_EQ(ref.source_rank, 1);
  EXPECT_EQ(s.tiles[0].row_begin, 0);
  EXPECT_EQ(s.tiles[1].row_begin, 4);
}

TEST(ResolveLayer0Test, LocalTilesScheduledFirst) {
  const auto rt = three_expert_table();
  const ModelConfig m{1, 6, 2, 8, 8, 2};
  const auto s = resolve_layer0(rt, 0, SharedTensorMeta::layer0(m, {1, 2}, 8, 1));
  std::size_t local = 0;
  for (const auto& t : s.tiles) local += t.remote_deps(0) == 0;
  ASSERT_GT(local, 0u);
  for (std::size_t i = 0; i < s.tiles.size(); ++i) {
    EXPECT_EQ(s.tiles[i].remote_deps(0) == 0, i < local) << "position " << i;
  }
}

TEST(ResolveLayer0Test, RaggedLastTileAndEmptyExperts) {
  const ModelConfig m{1, 4, 1, 4, 4, 2};
  const RoutingTable rt(m, ParallelSpec{1, 1}, {{0}, {0}, {0}, {0}, {0}, {1}});
  const auto s = resolve_layer0(rt, 0, SharedTensorMeta::layer0(m, {1, 1}, 6, 4));
  ASSERT_EQ(s.tiles.size(), 3u);
  EXPECT_EQ(s.tiles[0].rows(), 4);
  EXPECT_EQ(s.tiles[1].rows(), 1);
  EXPECT_EQ(s.tiles[2].expert, 1);
  EXPECT_TRUE(validate_schedule(s, rt, 0).empty());
}

TEST(ResolveLayer0Test, HiddenColumnSplit) {
  const ModelConfig m{1, 2, 1, 4, 10, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 1}, WorkloadSpec{6, 0, 0.0});
  const auto s = resolve_layer0(rt, 0, SharedTensorMeta::layer0(m, {1, 1}, 6, 4, 4));
  // Each expert has 3 rows: one row tile, three column blocks (4, 4, 2).
  ASSERT_EQ(s.tiles.size(), 6u);
  std::int64_t cols = 0;
  for (const auto& t : s.tiles) cols += t.width();
  EXPECT_EQ(cols, 20);
  EXPECT_TRUE(validate_schedule(s, rt, 0).empty());
}

TEST(ResolveLayer0Test, RejectsColumnDecomposition) {
  const ModelConfig m{1, 2, 1, 4, 4, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 1}, WorkloadSpec{4, 0, 0.0});
  EXPECT_THROW(resolve_layer0(rt, 0, SharedTensorMeta::layer1(m, {1, 1}, 4, 2)), ConfigError);
  EXPECT_THROW(resolve_layer1(rt, 0, SharedTensorMeta::layer0(m, {1, 1}, 4)), ConfigError);
}

TEST(ResolveLayer1Test, ColumnMajorWaves) {
  const ModelConfig m{1, 2, 1, 4, 4, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 1}, WorkloadSpec{4, 0, 0.0});
  const auto s = resolve_layer1(rt, 0, SharedTensorMeta::layer1(m, {1, 1}, 4, 2));
  ASSERT_EQ(s.tiles.size(), 4u);
  const std::vector<std::pair<std::int64_t, std::int64_t>> want = {
      {0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(std::make_pair(s.tiles[i].expert, s.tiles[i].col_block), want[i]);
  }
  ASSERT_EQ(s.reduce_chunks.size(), 2u);
  EXPECT_EQ(s.reduce_chunks[0].after_position, 2);
  EXPECT_EQ(s.reduce_chunks[1].after_position, 4);
  EXPECT_EQ(s.reduce_chunks[0].prerequisites,
            (std::vector<std::int64_t>{s.tiles[0].tile_id, s.tiles[1].tile_id}));
}

TEST(ResolveLayer1Test, SingleColumnBlockIsExpertSequential) {
  const ModelConfig m{1, 3, 2, 4, 4, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 1}, WorkloadSpec{9, 0, 0.0});
  const auto s = resolve_layer1(rt, 0, SharedTensorMeta::layer1(m, {1, 1}, 9, 4));
  ASSERT_EQ(s.reduce_chunks.size(), 1u);
  for (std::size_t i = 1; i < s.tiles.size(); ++i) {
    EXPECT_LE(s.tiles[i - 1].expert, s.tiles[i].expert);
  }
  EXPECT_EQ(s.reduce_chunks[0].after_position, static_cast<std::int64_t>(s.tiles.size()));
}

TEST(ResolveLayer1Test, FourWavesOneReduceEach) {
  const ModelConfig m{1, 3, 3, 8, 4, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 1}, WorkloadSpec{5, 0, 0.0});
  const auto s = resolve_layer1(rt, 0, SharedTensorMeta::layer1(m, {1, 1}, 5, 2));
  ASSERT_EQ(s.tiles.size(), 12u);
  ASSERT_EQ(s.reduce_chunks.size(), 4u);
  for (std::int64_t c = 0; c < 4; ++c) {
    for (std::int64_t i = 0; i < 3; ++i) EXPECT_EQ(s.tiles[3 * c + i].col_block, c);
    EXPECT_EQ(s.reduce_chunks[c].col_block, c);
    EXPECT_EQ(s.reduce_chunks[c].after_position, 3 * (c + 1));
  }
  EXPECT_TRUE(validate_schedule(s, rt, 0).empty());
}

TEST(ResolveLayer1Test, DefaultTileColsLeavesFourWaves) {
  EXPECT_EQ(default_tile_cols(4096), 128);
  EXPECT_EQ(default_tile_cols(512), 128);
  EXPECT_EQ(default_tile_cols(256), 64);
  EXPECT_EQ(default_tile_cols(3), 1);
  EXPECT_THROW(SharedTensorMeta::layer1(ModelConfig{1, 1, 1, 4, 4, 2}, {1, 1}, 4, 5).validate(),
               ConfigError);
}

TEST(ValidateScheduleTest, DeletedTileIsMissing) {
  const auto rt = three_expert_table();
  const ModelConfig m{1, 6, 2, 8, 8, 2};
  auto s = resolve_layer0(rt, 0, SharedTensorMeta::layer0(m, {1, 2}, 8, 2));
  const auto victim = s.tiles[1].tile_id;
  s.tiles.erase(s.tiles.begin() + 1);
  const auto v = validate_schedule(s, rt, 0);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(to_string(v[0].kind), "missing tile");
  EXPECT_EQ(v[0].tile_id, victim);
}

TEST(ValidateScheduleTest, EarlyReduceIsPremature) {
  const auto rt = three_expert_table();
  const ModelConfig m{1, 6, 2, 8, 8, 2};
  auto s = resolve_layer1(rt, 0, SharedTensorMeta::layer1(m, {1, 2}, 8, 4));
  ASSERT_GE(s.reduce_chunks.size(), 2u);
  s.reduce_chunks[1].after_position = s.reduce_chunks[0].after_position;
  const auto v = validate_schedule(s, rt, 0);
  ASSERT_FALSE(v.empty());
  for (const auto& x : v) EXPECT_EQ(to_string(x.kind), "premature reduce");
}

TEST(ValidateScheduleTest, ForeignTokenIsBadDependency) {
  const auto rt = three_expert_table();
  const ModelConfig m{1, 6, 2, 8, 8, 2};
  auto s = resolve_layer0(rt, 0, SharedTensorMeta::layer0(m, {1, 2}, 8, 8));
  // Token 3 is routed to experts 2 and 4 only.
  ASSERT_EQ(s.tiles[0].expert, 0);
  s.tiles[0].tokens.back() = TokenRef{3, 0};
  const auto v = validate_schedule(s, rt, 0);
  ASSERT_FALSE(v.empty());
  EXPECT_EQ(v[0].kind, ViolationKind::kBadDependency);
}

TEST(ValidateScheduleTest, EveryMutationKindIsFlagged) {
  const ModelConfig m{1, 8, 2, 8, 8, 2};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto rt = build_routing(m, ParallelSpec{1, 2}, WorkloadSpec{40, seed, 0.03});
    for (int layer = 0; layer < 2; ++layer) {
      const auto base =
          layer == 0 ? resolve_layer0(rt, 1, SharedTensorMeta::layer0(m, {1, 2}, 40, 4, 4))
                     : resolve_layer1(rt, 1, SharedTensorMeta::layer1(m, {1, 2}, 40, 2, 4));
      ASSERT_TRUE(validate_schedule(base, rt, 1).empty());
      for (auto kind : applicable_mutations(base)) {
        auto s = base;
        SplitMix64 rng(seed * 31 + static_cast<std::uint64_t>(kind));
        const auto mut = mutate_schedule(s, kind, rng);
        ASSERT_TRUE(mut.has_value());
        EXPECT_FALSE(validate_schedule(s, rt, 1).empty())
            << "layer" << layer << " " << to_string(kind) << ": " << mut->description;
      }
    }
  }
}

TEST(ValidateScheduleTest, WrongRankOrDimension) {
  const auto rt = three_expert_table();
  const ModelConfig m{1, 6, 2, 8, 8, 2};
  const auto s = resolve_layer0(rt, 0, SharedTensorMeta::layer0(m, {1, 2}, 8, 2));
  EXPECT_FALSE(validate_schedule(s, rt, 1).empty());
  auto flipped = s;
  flipped.meta.dim = DecomposedDim::kN;
  const auto v = validate_schedule(flipped, rt, 0);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, ViolationKind::kWrongDimension);
}

TEST(ScheduleOrderTest, PrefixLocalityAndWaves) {
  const ModelConfig m{1, 8, 2, 12, 8, 2};
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const ParallelSpec par{seed % 2 == 0 ? 1 : 2, 4};
    const auto rt = build_routing(m, par, WorkloadSpec{static_cast<std::int64_t>(30 + (seed * 7) % 50), seed, 0.04});
    for (std::int64_t r = 0; r < par.world(); ++r) {
      const auto s0 =
          resolve_layer0(rt, r, SharedTensorMeta::layer0(m, par, rt.num_tokens(), 3));
      for (std::size_t i = 1; i < s0.tiles.size(); ++i) {
        EXPECT_LE(s0.tiles[i - 1].remote_deps(r), s0.tiles[i].remote_deps(r));
      }
      const auto s1 =
          resolve_layer1(rt, r, SharedTensorMeta::layer1(m, par, rt.num_tokens(), 5, 3));
      for (std::size_t i = 1; i < s1.tiles.size(); ++i) {
        EXPECT_LE(s1.tiles[i - 1].col_block, s1.tiles[i].col_block);
      }
      EXPECT_TRUE(validate_schedule(s0, rt, r).empty());
      EXPECT_TRUE(validate_schedule(s1, rt, r).empty());
    }
  }
}

TEST(ScheduleOrderTest, NaiveOrdersAreValidPermutations) {
  const ModelConfig m{1, 4, 2, 8, 8, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 2}, WorkloadSpec{33, 4, 0.02});
  const auto n0 = naive_layer0(rt, 0, SharedTensorMeta::layer0(m, {1, 2}, 33, 4));
  const auto n1 = naive_layer1(rt, 0, SharedTensorMeta::layer1(m, {1, 2}, 33, 2, 4));
  EXPECT_TRUE(validate_schedule(n0, rt, 0).empty());
  EXPECT_TRUE(validate_schedule(n1, rt, 0).empty());
  for (std::size_t i = 1; i < n0.tiles.size(); ++i) {
    EXPECT_LT(n0.tiles[i - 1].tile_id, n0.tiles[i].tile_id);
  }
}

TEST(ScheduleJsonTest, RoundTrip) {
  const ModelConfig m{1, 4, 2, 8, 8, 2};
  const auto rt = build_routing(m, ParallelSpec{1, 2}, WorkloadSpec{21, 4, 0.02});
  const auto s0 = resolve_layer0(rt, 1, SharedTensorMeta::layer0(m, {1, 2}, 21, 4, 4));
  const auto s1 = resolve_layer1(rt, 1, SharedTensorMeta::layer1(m, {1, 2}, 21, 2, 4));
  EXPECT_EQ(TileSchedule::from_json(Json::parse(s0.to_json().dump())), s0);
  EXPECT_EQ(TileSchedule::from_json(Json::parse(s1.to_json().dump())), s1);
  const auto j = s1.to_json();
  EXPECT_TRUE(j.at("tiles").at(0).contains("deps"));
  EXPECT_TRUE(j.at("tiles").at(0).contains("rows"));
}

}  // namespace
}  // namespace moesim
