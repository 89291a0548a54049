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

// Seeded random problem instances shared by unit and acceptance tests.

#ifndef MOESIM_TESTS_FIXTURES_H_
#define MOESIM_TESTS_FIXTURES_H_

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>

#include "moesim/dependency_resolver.h"
#include "moesim/experiment.h"
#include "moesim/moe_config.h"
#include "moesim/overlap_simulator.h"
#include "moesim/random.h"

namespace fixture {

struct SimInstance {
  moesim::ModelConfig model;
  moesim::ParallelSpec parallel;
  moesim::RoutingTable routing;
  std::int64_t rank = 0;
  moesim::SharedTensorMeta meta0;
  moesim::SharedTensorMeta meta1;
  moesim::CostModel cost;
  moesim::KernelSplit split;
  moesim::TileSchedule layer0;
  moesim::TileSchedule layer1;
};

inline moesim::CostModel random_cost(moesim::SplitMix64& rng) {
  moesim::CostModel c;
  c.name = "random";
  c.alpha_tile_ns = static_cast<double>(rng.range(0, 400));
  c.compute_rate = 1.0 + 20.0 * rng.unit();
  c.alpha_msg_ns = static_cast<double>(rng.range(0, 400));
  c.intra_bandwidth = 0.05 + 2.0 * rng.unit();
  c.local_bandwidth = c.intra_bandwidth * (1.0 + 4.0 * rng.unit());
  c.intra_aggregate_bandwidth = rng.below(2) ? 0.0 : c.intra_bandwidth * rng.range(1, 6);
  c.local_aggregate_bandwidth = rng.below(2) ? 0.0 : c.local_bandwidth * rng.range(1, 6);
  c.weight_bandwidth = rng.below(2) ? 0.0 : 1.0 + 10.0 * rng.unit();
  c.chunk_overhead_ns = static_cast<double>(rng.range(0, 2000));
  c.pad_ragged_tiles = rng.below(2) == 1;
  c.message_tokens = rng.range(0, 6);
  return c;
}

// Small random MoE rank problem; sizes stay in the low hundreds of tasks.
inline SimInstance random_instance(std::uint64_t seed) {
  moesim::SplitMix64 rng(seed * 0x9E3779B97F4A7C15ull + 17);
  const std::int64_t E = std::int64_t{1} << rng.range(0, 3);
  const std::int64_t topk = rng.range(1, E);
  const std::int64_t tp = std::int64_t{1} << rng.range(0, 2);
  const std::int64_t ep = std::int64_t{1} << rng.range(0, std::min<std::int64_t>(2, static_cast<std::int64_t>(std::log2(E))));
  moesim::ModelConfig model{1, E, topk, 4 * rng.range(1, 8), 4 * tp * rng.range(1, 6), 2};
  moesim::ParallelSpec par{tp, ep};
  const std::int64_t M = rng.range(0, 90);
  const double max_std = moesim::max_fraction_std(E, topk);
  const double target = rng.below(3) == 0 ? 0.0 : 0.5 * max_std * rng.unit();
  SimInstance s{model,
                par,
                moesim::build_routing(model, par, moesim::WorkloadSpec{M, seed, target}),
                static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(par.world()))),
                {},
                {},
                random_cost(rng),
                {},
                {},
                {}};
  const std::int64_t tile_rows = rng.range(1, 8);
  s.meta0 = moesim::SharedTensorMeta::layer0(model, par, M, tile_rows,
                                             rng.below(2) ? 0 : rng.range(1, model.K / tp));
  s.meta1 = moesim::SharedTensorMeta::layer1(model, par, M, rng.range(1, model.N), tile_rows);
  const std::int64_t n = rng.range(2, 10);
  s.split = moesim::KernelSplit::with_comm_blocks(n, rng.range(1, n - 1));
  s.layer0 = moesim::resolve_layer0(s.routing, s.rank, s.meta0);
  s.layer1 = moesim::resolve_layer1(s.routing, s.rank, s.meta1);
  return s;
}

// Cost with nothing but fixed per-tile and per-message latencies.
inline moesim::CostModel latency_only(double tile_ns, double msg_ns) {
  moesim::CostModel c;
  c.name = "latency-only";
  c.alpha_tile_ns = tile_ns;
  c.compute_rate = 1e18;
  c.alpha_msg_ns = msg_ns;
  c.local_bandwidth = 1e18;
  c.intra_bandwidth = 1e18;
  return c;
}

inline std::string data_path(const std::string& name) {
  return std::string(MOESIM_TEST_DATA_DIR) + "/" + name;
}

// Run-command config overlaid with a JSON file from tests/data.
inline moesim::ExperimentConfig load_config(const std::string& name) {
  auto config = moesim::ExperimentConfig::defaults(moesim::Command::kRun);
  std::ifstream in(data_path(name));
  config.apply_json(moesim::Json::parse(in));
  config.validate();
  return config;
}

}  // namespace fixture

#endif  // MOESIM_TESTS_FIXTURES_H_
