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

#ifndef MOESIM_DEPENDENCY_RESOLVER_H_
#define MOESIM_DEPENDENCY_RESOLVER_H_

#include <cstdint>
#include <string>
#include <vector>

#include "moesim/moe_config.h"

namespace moesim {

enum class Layer { kLayer0 = 0, kLayer1 = 1 };

// Dimension along which a shared tensor of shape (M * topk, N) is cut into
// independent pieces. Layer0's GEMM may only be cut along tokens; layer1's
// topk reduction couples tokens, so it may only be cut along columns.
enum class DecomposedDim { kM, kN };

struct SharedTensorMeta {
  std::int64_t global_rows = 0;  // M * topk
  std::int64_t cols = 1;         // N
  DecomposedDim dim = DecomposedDim::kM;
  std::int64_t tile_rows = 128;  // T_M
  std::int64_t tile_cols = 128;  // T_N, output columns per layer1 tile
  std::int64_t hidden_cols = 1;  // K / tp held by one rank
  // Output-column tile width over the hidden dimension for layer0 tiles;
  // 0 keeps each layer0 tile at full hidden width.
  std::int64_t hidden_tile_cols = 0;
  std::int64_t dtype_bytes = 2;

  static SharedTensorMeta layer0(const ModelConfig& model,
                                 const ParallelSpec& par, std::int64_t M,
                                 std::int64_t tile_rows = 128,
                                 std::int64_t hidden_tile_cols = 0);
  static SharedTensorMeta layer1(const ModelConfig& model,
                                 const ParallelSpec& par, std::int64_t M,
                                 std::int64_t tile_cols,
                                 std::int64_t tile_rows = 128);

  // Column width of tiles for this layer's output.
  std::int64_t output_cols() const {
    return dim == DecomposedDim::kM ? hidden_cols : cols;
  }
  std::int64_t output_tile_cols() const {
    if (dim == DecomposedDim::kN) return tile_cols;
    return hidden_tile_cols > 0 ? hidden_tile_cols : hidden_cols;
  }
  std::int64_t num_col_blocks() const {
    const auto w = output_tile_cols();
    return (output_cols() + w - 1) / w;
  }

  void validate() const;
  bool operator==(const SharedTensorMeta&) const = default;
};

// Default T_N: 128 when that leaves at least four column waves, otherwise
// N / 4 (at least 1).
std::int64_t default_tile_cols(std::int64_t N);

struct TokenRef {
  std::int64_t token = 0;
  std::int64_t source_rank = 0;

  bool operator==(const TokenRef&) const = default;
  auto operator<=>(const TokenRef&) const = default;
};

// One expert's received tokens in execution order.
struct ExpertBlock {
  std::int64_t expert = 0;
  std::vector<TokenRef> tokens;
};

// Per-expert sorted layout for one rank: local tokens first, then remote
// sources by ascending (source - rank) mod W, token id order within a source.
std::vector<ExpertBlock> sort_tokens_by_source(const RoutingTable& routing,
                                               std::int64_t rank);

struct Tile {
  std::int64_t tile_id = 0;
  std::int64_t expert = 0;
  std::int64_t row_begin = 0;  // within the expert's sorted block
  std::int64_t row_end = 0;
  std::int64_t col_begin = 0;  // output columns (hidden for layer0, N for layer1)
  std::int64_t col_end = 0;
  std::int64_t col_block = 0;
  // Tokens occupying rows [row_begin, row_end). For layer0 their arrival
  // gates the tile; layer1 rows are produced locally and gate nothing.
  std::vector<TokenRef> tokens;

  std::int64_t rows() const { return row_end - row_begin; }
  std::int64_t width() const { return col_end - col_begin; }
  std::int64_t remote_deps(std::int64_t rank) const;

  bool operator==(const Tile&) const = default;
};

// Layer1 reduce + send step for one column block. It is issued once the
// first `after_position` scheduled tiles have been issued.
struct ReduceChunk {
  std::int64_t col_block = 0;
  std::int64_t col_begin = 0;
  std::int64_t col_end = 0;
  std::vector<std::int64_t> prerequisites;  // tile ids, ascending
  std::int64_t after_position = 0;

  bool operator==(const ReduceChunk&) const = default;
};

struct TileSchedule {
  Layer layer = Layer::kLayer0;
  std::int64_t rank = 0;
  SharedTensorMeta meta;
  std::vector<Tile> tiles;                 // in execution order
  std::vector<ReduceChunk> reduce_chunks;  // layer1 only

  Json to_json() const;
  static TileSchedule from_json(const Json& j);

  bool operator==(const TileSchedule&) const = default;
};

// Layer0: T_M-row tiles per expert block, ordered by ascending count of
// remote dependencies, then (expert, row start, column start).
TileSchedule resolve_layer0(const RoutingTable& routing, std::int64_t rank,
                            const SharedTensorMeta& meta);

// Layer1: column blocks outermost, experts, then row tiles; one reduce chunk
// per column block, issued right after its last tile.
TileSchedule resolve_layer1(const RoutingTable& routing, std::int64_t rank,
                            const SharedTensorMeta& meta);

// Unscheduled orders used as baselines: (expert, row, column) ascending
// over the same tiles. For layer1 reduce chunks are issued after all tiles.
TileSchedule naive_layer0(const RoutingTable& routing, std::int64_t rank,
                          const SharedTensorMeta& meta);
TileSchedule naive_layer1(const RoutingTable& routing, std::int64_t rank,
                          const SharedTensorMeta& meta);

enum class ViolationKind {
  kMissingTile,
  kDuplicateTile,
  kUnexpectedTile,
  kBadDependency,
  kMissingReduce,
  kIncompleteReduce,
  kPrematureReduce,
  kWrongDimension,
};

std::string to_string(ViolationKind kind);

struct Violation {
  ViolationKind kind;
  std::int64_t tile_id = -1;  // -1 when not tied to one tile
  std::string reason;
};

// Empty iff the schedule covers exactly the expected tiles once each, every
// dependency is a token routed to the tile's expert in the right row, and
// (layer1) each column block has one reduce chunk whose prerequisites are
// exactly that block's tiles and all precede it.
std::vector<Violation> validate_schedule(const TileSchedule& schedule,
                                         const RoutingTable& routing,
                                         std::int64_t rank);

}  // namespace moesim

#endif  // MOESIM_DEPENDENCY_RESOLVER_H_
