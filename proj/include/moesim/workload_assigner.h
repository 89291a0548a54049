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

#ifndef MOESIM_WORKLOAD_ASSIGNER_H_
#define MOESIM_WORKLOAD_ASSIGNER_H_

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "moesim/moe_config.h"
#include "moesim/overlap_simulator.h"

namespace moesim {

// Smallest power of two >= M (1 for M <= 1).
std::int64_t m_bucket(std::int64_t M);

// Configuration a split was profiled for.
struct SplitKey {
  std::int64_t m_bucket = 1;
  std::int64_t tp = 1;
  std::int64_t ep = 1;
  std::int64_t num_experts = 1;
  std::int64_t topk = 1;
  std::int64_t N = 1;
  std::int64_t K = 1;
  std::string cost_preset;
  std::int64_t n = 132;

  // True when everything but the M bucket agrees.
  bool compatible(const SplitKey& other) const;
  bool operator==(const SplitKey&) const = default;

  Json to_json() const;
  static SplitKey from_json(const Json& j);
};

struct CurvePoint {
  std::int64_t n_c = 1;
  std::int64_t latency_ns = 0;

  bool operator==(const CurvePoint&) const = default;
};

struct SplitRecord {
  SplitKey key;
  std::int64_t optimal_n_c = 1;
  std::int64_t latency_ns = 0;
  std::vector<CurvePoint> curve;  // ascending n_c

  KernelSplit split() const { return KernelSplit::with_comm_blocks(key.n, optimal_n_c); }
  bool operator==(const SplitRecord&) const = default;
};

// metadata.json:
//   {"version": 1, "records": [{"key": {...}, "optimal_n_c": .., "latency_ns": ..,
//                               "curve": [[n_c, latency_ns], ...]}]}
struct SplitMetadata {
  std::vector<SplitRecord> records;

  // Replaces a record with the same key, otherwise appends.
  void upsert(SplitRecord record);

  Json to_json() const;
  static SplitMetadata from_json(const Json& j);
  // Throws ConfigError on unreadable or malformed files.
  static SplitMetadata load(const std::string& path);
  // Writes a sibling temporary file and renames it over `path`.
  void save(const std::string& path) const;
};

enum class SweepPhase { kLayer0, kLayer1, kBoth };
SweepPhase parse_sweep_phase(std::string_view s);
std::string to_string(SweepPhase p);

struct SweepConfig {
  ModelConfig model;
  ParallelSpec parallel;
  WorkloadSpec workload;
  CostModel cost;
  std::int64_t n = 132;
  std::int64_t tile_rows = 128;
  std::int64_t tile_cols = 0;  // 0: default_tile_cols(N)
  std::int64_t hidden_tile_cols = 0;  // 0: default_tile_cols(K / tp)
  SweepPhase phase = SweepPhase::kLayer1;
  std::int64_t rank = 0;
  std::int64_t stride = 1;
  std::int64_t jobs = 1;

  SplitKey key() const;
};

// n_c values visited by a sweep over [1, n - 1]; n - 1 is always included.
std::vector<std::int64_t> sweep_points(std::int64_t n, std::int64_t stride);

// Simulates the fused kernel(s) for every swept n_c and records the argmin,
// breaking ties toward fewer comm blocks.
SplitRecord sweep_split(const SweepConfig& config);

// Exact key match, else the record with the nearest M bucket and otherwise
// identical key (ties toward the smaller bucket). Throws
// UnprofiledConfigError when nothing is compatible.
KernelSplit select_split(const SplitMetadata& metadata, const SplitKey& query);
const SplitRecord& select_record(const SplitMetadata& metadata,
                                 const SplitKey& query);

// "n_c,latency_ns" rows in ascending n_c.
std::string curve_csv(const SplitRecord& record);

}  // namespace moesim

#endif  // MOESIM_WORKLOAD_ASSIGNER_H_
