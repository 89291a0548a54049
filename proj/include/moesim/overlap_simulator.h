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

#ifndef MOESIM_OVERLAP_SIMULATOR_H_
#define MOESIM_OVERLAP_SIMULATOR_H_

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "moesim/dependency_resolver.h"
#include "moesim/moe_config.h"

namespace moesim {

// Thread-block division of a fused kernel: n_p compute blocks (ids
// [0, n_p)) and n_c communication blocks (ids [n_p, n)).
struct KernelSplit {
  std::int64_t n = 132;
  std::int64_t n_p = 131;
  std::int64_t n_c = 1;

  static KernelSplit with_comm_blocks(std::int64_t n, std::int64_t n_c) {
    return {n, n - n_c, n_c};
  }
  // Throws ConfigError unless n_p + n_c == n, n_p >= 1 and n_c >= 1.
  void validate() const;

  bool operator==(const KernelSplit&) const = default;
};

// Rounds half away from zero to integer nanoseconds.
std::int64_t round_half_up(double ns);

// Timing model. Tile time is alpha_tile + 2 * rows * cols * K_local /
// compute_rate, plus weight_bytes / weight_bandwidth for the first row tile
// of each (expert, column block), which streams that weight slice from
// memory; later row tiles reuse it from cache. Message time is alpha_msg + bytes / bandwidth, where the
// per-block bandwidth of a link is capped by aggregate / n_c when an
// aggregate limit is set.
struct CostModel {
  std::string name = "custom";
  double alpha_tile_ns = 0.0;
  double compute_rate = 1.0;                // flop per ns, per compute block
  double alpha_msg_ns = 0.0;
  double local_bandwidth = 1.0;             // bytes per ns, per comm block
  double intra_bandwidth = 1.0;             // bytes per ns, per comm block
  double local_aggregate_bandwidth = 0.0;   // per rank; 0 means no cap
  double intra_aggregate_bandwidth = 0.0;   // per rank; 0 means no cap
  double weight_bandwidth = 0.0;            // bytes per ns, per compute block; 0: free
  double chunk_overhead_ns = 0.0;           // per coarse-grained chunk
  // Ragged tiles cost a full T_M-row tile, as an MMA tile does.
  bool pad_ragged_tiles = false;
  // Upper bound on tokens per layer1 result message; 0 means one message per
  // (reduce chunk, destination).
  std::int64_t message_tokens = 0;

  void validate() const;

  std::int64_t tile_ns(std::int64_t rows, std::int64_t cols,
                       std::int64_t inner, std::int64_t tile_rows,
                       std::int64_t weight_bytes = 0) const;
  std::int64_t message_ns(std::int64_t bytes, bool local,
                          std::int64_t n_c) const;

  // Costs with alpha_msg = 0 and infinite bandwidth.
  CostModel without_communication() const;

  Json to_json() const;
  static CostModel from_json(const Json& j);
};

// "h800": NVLink-class node. "l20": PCIe node with ~25 GB/s between GPUs.
CostModel cost_preset(std::string_view name);
std::vector<std::string> cost_preset_names();

enum class BlockKind { kCompute, kComm };

struct SimTile {
  std::int64_t task_id = 0;
  std::int64_t tile_id = 0;
  std::int64_t duration = 0;
  std::vector<std::int64_t> deps;  // phase-local message indices (layer0)
};

struct SimMessage {
  std::int64_t task_id = 0;
  std::int64_t duration = 0;
  std::int64_t block = 0;   // comm block index in [0, n_c)
  std::int64_t chunk = -1;  // layer1: index into the phase's chunks
  std::int64_t token = -1;  // layer0: the token moved
  std::int64_t dest = 0;
  std::int64_t tokens = 0;
  std::int64_t bytes = 0;
};

struct SimPhase {
  Layer layer = Layer::kLayer0;
  std::vector<SimTile> tiles;  // schedule order
  std::vector<SimMessage> messages;
  std::vector<std::vector<std::int64_t>> chunk_prereqs;  // tile indices
};

// Tasks of one rank's fused layer0 and layer1 kernels, their durations and
// dependencies. Layer1 starts when layer0 has fully finished.
struct SimProblem {
  KernelSplit split;
  std::int64_t rank = 0;
  std::vector<SimPhase> phases;
};

// Destination of a layer1 result for a token with source rank `source`,
// computed on `rank`: the rank of the source's EP group that has the same TP
// index. Cross-TP summation happens outside the fused kernel.
std::int64_t result_destination(const ParallelSpec& par, std::int64_t source,
                                std::int64_t rank);

// Either schedule may be null to simulate a single kernel. Throws
// InvalidScheduleError when a schedule does not validate; callers that
// already validated may pass validate = false.
SimProblem build_problem(const TileSchedule* layer0, const TileSchedule* layer1,
                         const RoutingTable& routing, const CostModel& cost,
                         const KernelSplit& split, bool validate = true);

struct Interval {
  std::int64_t block_id = 0;
  BlockKind kind = BlockKind::kCompute;
  std::int64_t task_id = 0;
  std::int64_t start_ns = 0;
  std::int64_t end_ns = 0;

  bool operator==(const Interval&) const = default;
};

struct SimResult {
  std::string mode;
  KernelSplit split;
  std::int64_t total_latency_ns = 0;
  std::vector<std::int64_t> phase_end_ns;
  std::vector<Interval> intervals;
  std::int64_t comm_busy_ns = 0;     // union of comm intervals
  std::int64_t compute_busy_ns = 0;  // union of compute intervals
  std::int64_t exposed_comm_ns = 0;  // comm active, no compute active
  double hidden_fraction = 0.0;      // 1 - exposed / comm_busy; 0 if no comm
  std::int64_t comm_work_ns = 0;     // sum of comm interval lengths
  std::int64_t compute_work_ns = 0;  // sum of compute interval lengths
  // Per compute block: idle gaps before and between its tiles.
  std::vector<std::int64_t> bubble_ns;

  double total_latency_us() const { return total_latency_ns / 1000.0; }
  // Summary without the interval list.
  Json to_json() const;
  // Header block_id,block_kind,task_id,start_ns,end_ns; rows ordered by
  // (start_ns, block_id).
  std::string timeline_csv() const;
};

// Fine-grained, thread-block-specialized execution. Comm blocks work through
// their round-robin share of messages in FIFO order; an idle compute block
// claims the earliest tile in schedule order whose tokens have all arrived;
// layer1 result messages are released when their reduce chunk's tiles are
// complete. Simultaneous decisions go to lower task id, then lower block id.
SimResult simulate_fine(const SimProblem& problem);
SimResult simulate_fine(const TileSchedule* layer0, const TileSchedule* layer1,
                        const RoutingTable& routing, const CostModel& cost,
                        const KernelSplit& split);

struct LayerMetas {
  SharedTensorMeta layer0;
  std::optional<SharedTensorMeta> layer1;
};

// Kernel-level pipelining over `chunks` token chunks on the same blocks and
// the same messages: per chunk a receive stage, a compute stage (layer0
// tiles, then layer1 tiles, plus chunk_overhead) and a send stage. Stages on
// the comm blocks run one at a time in readiness order (receives first).
SimResult simulate_coarse(const RoutingTable& routing, std::int64_t rank,
                          const LayerMetas& metas, const CostModel& cost,
                          const KernelSplit& split, std::int64_t chunks);

// Receive everything, compute everything, send everything; no chunk overhead.
SimResult simulate_sequential(const RoutingTable& routing, std::int64_t rank,
                              const LayerMetas& metas, const CostModel& cost,
                              const KernelSplit& split);

// max(compute work / n_p, heaviest comm block queue, longest serial chain),
// per kernel, summed over kernels. simulate_fine never beats it.
std::int64_t latency_lower_bound(const SimProblem& problem);

// Dependency-safety and bookkeeping checks of a fine-grained timeline.
// Returns human-readable violations; empty when the timeline is sound.
std::vector<std::string> audit_timeline(const SimProblem& problem,
                                        const SimResult& result);

// Exact measure of the union of [start, end) intervals.
std::int64_t union_length(std::vector<std::pair<std::int64_t, std::int64_t>> spans);

}  // namespace moesim

#endif  // MOESIM_OVERLAP_SIMULATOR_H_
