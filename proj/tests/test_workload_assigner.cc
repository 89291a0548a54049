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

#include <algorithm>
#include <filesystem>

#include "moesim/dependency_resolver.h"
#include "moesim/errors.h"
#include "moesim/workload_assigner.h"

namespace moesim {
namespace {

SweepConfig mixtral(std::int64_t tp, std::int64_t M, const std::string& preset = "h800") {
  SweepConfig c;
  c.model = model_preset("mixtral-8x7b");
  c.parallel = ParallelSpec{tp, 8 / tp};
  c.workload = WorkloadSpec{M, 0, 0.0};
  c.cost = cost_preset(preset);
  c.n = 132;
  return c;
}

SweepConfig small() {
  SweepConfig c;
  c.model = ModelConfig{1, 4, 2, 64, 128, 2};
  c.parallel = ParallelSpec{2, 2};
  c.workload = WorkloadSpec{200, 3, 0.05};
  c.cost = cost_preset("l20");
  c.n = 24;
  c.tile_rows = 16;
  c.phase = SweepPhase::kBoth;
  return c;
}

std::int64_t curve_min(const SplitRecord& r) {
  return std::min_element(r.curve.begin(), r.curve.end(),
                          [](const CurvePoint& a, const CurvePoint& b) {
                            return a.latency_ns < b.latency_ns;
                          })
      ->latency_ns;
}

TEST(MBucketTest, PowersOfTwo) {
  EXPECT_EQ(m_bucket(0), 1);
  EXPECT_EQ(m_bucket(1), 1);
  EXPECT_EQ(m_bucket(3), 4);
  EXPECT_EQ(m_bucket(4096), 4096);
  EXPECT_EQ(m_bucket(4097), 8192);
}

TEST(SweepPointsTest, CoversRangeAndLastPoint) {
  EXPECT_EQ(sweep_points(5, 1), (std::vector<std::int64_t>{1, 2, 3, 4}));
  EXPECT_EQ(sweep_points(10, 4), (std::vector<std::int64_t>{1, 5, 9}));
  EXPECT_EQ(sweep_points(10, 3), (std::vector<std::int64_t>{1, 4, 7, 9}));
  EXPECT_EQ(sweep_points(2, 7), (std::vector<std::int64_t>{1}));
  EXPECT_THROW(sweep_points(1, 1), ConfigError);
  EXPECT_THROW(sweep_points(8, 0), ConfigError);
}

TEST(SweepTest, OptimumIsArgminOfCurve) {
  for (auto phase : {SweepPhase::kLayer0, SweepPhase::kLayer1, SweepPhase::kBoth}) {
    auto c = small();
    c.phase = phase;
    const auto r = sweep_split(c);
    ASSERT_EQ(r.curve.size(), static_cast<std::size_t>(c.n - 1));
    EXPECT_EQ(r.latency_ns, curve_min(r));
    // First point reaching the minimum.
    for (const auto& p : r.curve) {
      if (p.latency_ns == r.latency_ns) {
        EXPECT_EQ(p.n_c, r.optimal_n_c);
        break;
      }
    }
    EXPECT_EQ(r.key, c.key());
    // Spot-check curve points against a direct simulation.
    const auto rt = build_routing(c.model, c.parallel, c.workload);
    const auto l0 = resolve_layer0(rt, c.rank, SharedTensorMeta::layer0(c.model, c.parallel, c.workload.M,
                                                                        c.tile_rows,
                                                                        default_tile_cols(c.model.K / 2)));
    const auto l1 = resolve_layer1(rt, c.rank, SharedTensorMeta::layer1(c.model, c.parallel, c.workload.M,
                                                                        default_tile_cols(c.model.N),
                                                                        c.tile_rows));
    for (std::int64_t n_c : {std::int64_t{1}, r.optimal_n_c, c.n - 1}) {
      const auto sim = simulate_fine(phase == SweepPhase::kLayer1 ? nullptr : &l0,
                                     phase == SweepPhase::kLayer0 ? nullptr : &l1, rt, c.cost,
                                     KernelSplit::with_comm_blocks(c.n, n_c));
      EXPECT_EQ(r.curve[n_c - 1].latency_ns, sim.total_latency_ns) << "n_c " << n_c;
    }
  }
}

TEST(SweepTest, ReSweepAndParallelSweepAgree) {
  auto c = small();
  const auto a = sweep_split(c);
  const auto b = sweep_split(c);
  EXPECT_EQ(a, b);
  c.jobs = 3;
  EXPECT_EQ(sweep_split(c), a);
}

TEST(SweepTest, StridedCurveVisitsOnlyStridePoints) {
  auto c = small();
  c.stride = 5;
  const auto r = sweep_split(c);
  std::vector<std::int64_t> seen;
  for (const auto& p : r.curve) seen.push_back(p.n_c);
  EXPECT_EQ(seen, sweep_points(c.n, 5));
}

TEST(SweepTest, WithoutCommunicationOneCommBlockWins) {
  auto c = small();
  c.cost = c.cost.without_communication();
  EXPECT_EQ(sweep_split(c).optimal_n_c, 1);
}

TEST(SweepTest, MixtralValleyForBothPresets) {
  for (const std::string preset : {"h800", "l20"}) {
    for (std::int64_t tp : {4, 8}) {
      for (std::int64_t M : {4096, 16384}) {
        const auto r = sweep_split(mixtral(tp, M, preset));
        SCOPED_TRACE(preset + " tp " + std::to_string(tp) + " M " + std::to_string(M));
        EXPECT_GT(r.optimal_n_c, 1);
        EXPECT_LT(r.optimal_n_c, 131);
        EXPECT_GT(r.curve.front().latency_ns, r.latency_ns);
        EXPECT_GT(r.curve.back().latency_ns, r.latency_ns);
      }
    }
  }
}

TEST(SweepTest, OptimumGrowsWithTokensAndShrinkingTp) {
  const auto tp8_small = sweep_split(mixtral(8, 4096));
  const auto tp8_large = sweep_split(mixtral(8, 16384));
  const auto tp4_large = sweep_split(mixtral(4, 16384));
  EXPECT_GE(tp8_large.optimal_n_c, tp8_small.optimal_n_c);
  EXPECT_GT(tp4_large.optimal_n_c, tp8_large.optimal_n_c);
}

SplitRecord record(std::int64_t bucket, std::int64_t tp, std::int64_t n_c) {
  SplitRecord r;
  r.key = mixtral(tp, bucket).key();
  r.optimal_n_c = n_c;
  r.latency_ns = 1000 + n_c;
  r.curve = {{1, 5000}, {n_c, 1000 + n_c}};
  return r;
}

TEST(SelectSplitTest, ExactThenNearestBucket) {
  SplitMetadata md;
  md.upsert(record(4096, 8, 19));
  md.upsert(record(16384, 8, 24));
  auto q = mixtral(8, 16384).key();
  EXPECT_EQ(select_split(md, q).n_c, 24);
  EXPECT_EQ(select_split(md, q).n, 132);
  q.m_bucket = 8192;  // equidistant in log terms; smaller bucket wins
  EXPECT_EQ(select_split(md, q).n_c, 19);
  q.m_bucket = 65536;
  EXPECT_EQ(select_split(md, q).n_c, 24);
  q.m_bucket = 1024;
  EXPECT_EQ(select_split(md, q).n_c, 19);
}

TEST(SelectSplitTest, UnprofiledConfigurationThrows) {
  SplitMetadata md;
  md.upsert(record(4096, 8, 19));
  EXPECT_THROW(select_split(md, mixtral(4, 4096).key()), UnprofiledConfigError);
  auto q = mixtral(8, 4096).key();
  q.cost_preset = "l20";
  EXPECT_THROW(select_split(md, q), UnprofiledConfigError);
  q = mixtral(8, 4096).key();
  q.n = 64;
  EXPECT_THROW(select_split(md, q), UnprofiledConfigError);
  EXPECT_THROW(select_split(SplitMetadata{}, q), UnprofiledConfigError);
}

TEST(SplitMetadataTest, UpsertReplacesSameKey) {
  SplitMetadata md;
  md.upsert(record(4096, 8, 19));
  md.upsert(record(4096, 8, 21));
  md.upsert(record(4096, 4, 40));
  ASSERT_EQ(md.records.size(), 2u);
  EXPECT_EQ(md.records[0].optimal_n_c, 21);
}

TEST(SplitMetadataTest, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "moesim_metadata_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "metadata.json").string();
  SplitMetadata md;
  md.upsert(sweep_split(small()));
  md.upsert(record(16384, 8, 24));
  md.save(path);
  const auto back = SplitMetadata::load(path);
  EXPECT_EQ(back.records, md.records);
  EXPECT_EQ(back.to_json(), md.to_json());
  EXPECT_EQ(md.to_json()["version"], 1);
  EXPECT_THROW(SplitMetadata::load((dir / "missing.json").string()), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(CurveCsvTest, HeaderAndRows) {
  const auto r = record(4096, 8, 19);
  EXPECT_EQ(curve_csv(r), "n_c,latency_ns\n1,5000\n19,1019\n");
}

}  // namespace
}  // namespace moesim
