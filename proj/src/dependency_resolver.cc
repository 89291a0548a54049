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

#include "moesim/dependency_resolver.h"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include "moesim/errors.h"

namespace moesim {

SharedTensorMeta SharedTensorMeta::layer0(const ModelConfig& model,
                                          const ParallelSpec& par,
                                          std::int64_t M,
                                          std::int64_t tile_rows,
                                          std::int64_t hidden_tile_cols) {
  par.validate_for(model);
  SharedTensorMeta m;
  m.global_rows = M * model.topk;
  m.cols = model.N;
  m.dim = DecomposedDim::kM;
  m.tile_rows = tile_rows;
  m.tile_cols = default_tile_cols(model.N);
  m.hidden_cols = model.K / par.tp;
  m.hidden_tile_cols = hidden_tile_cols;
  m.dtype_bytes = model.dtype_bytes;
  m.validate();
  return m;
}

SharedTensorMeta SharedTensorMeta::layer1(const ModelConfig& model,
                                          const ParallelSpec& par,
                                          std::int64_t M,
                                          std::int64_t tile_cols,
                                          std::int64_t tile_rows) {
  par.validate_for(model);
  SharedTensorMeta m;
  m.global_rows = M * model.topk;
  m.cols = model.N;
  m.dim = DecomposedDim::kN;
  m.tile_rows = tile_rows;
  m.tile_cols = tile_cols;
  m.hidden_cols = model.K / par.tp;
  m.dtype_bytes = model.dtype_bytes;
  m.validate();
  return m;
}

void SharedTensorMeta::validate() const {
  if (global_rows < 0) throw ConfigError("meta: negative row count");
  if (cols < 1 || hidden_cols < 1) throw ConfigError("meta: empty columns");
  if (tile_rows < 1) throw ConfigError("meta: T_M must be >= 1");
  if (tile_cols < 1 || tile_cols > cols) {
    throw ConfigError("meta: T_N must lie in [1, N]");
  }
  if (hidden_tile_cols < 0 || hidden_tile_cols > hidden_cols) {
    throw ConfigError("meta: hidden tile width must lie in [0, K/tp]");
  }
}

std::int64_t default_tile_cols(std::int64_t N) {
  if (N >= 4 * 128) return 128;
  return std::max<std::int64_t>(1, N / 4);
}

std::int64_t Tile::remote_deps(std::int64_t rank) const {
  return std::count_if(tokens.begin(), tokens.end(),
                       [&](const TokenRef& t) { return t.source_rank != rank; });
}

namespace {

void check_rank(const RoutingTable& routing, std::int64_t rank) {
  if (rank < 0 || rank >= routing.world()) {
    throw ConfigError("rank " + std::to_string(rank) + " outside [0, " +
                      std::to_string(routing.world()) + ")");
  }
}

// Tiles of one rank in canonical (expert, row block, column block) order,
// with tile_id equal to the canonical index.
std::vector<Tile> enumerate_tiles(const std::vector<ExpertBlock>& blocks,
                                  const SharedTensorMeta& meta) {
  std::vector<Tile> tiles;
  const std::int64_t width = meta.output_tile_cols();
  const std::int64_t total_cols = meta.output_cols();
  for (const auto& block : blocks) {
    const auto n = static_cast<std::int64_t>(block.tokens.size());
    for (std::int64_t r = 0; r < n; r += meta.tile_rows) {
      const std::int64_t r_end = std::min(n, r + meta.tile_rows);
      for (std::int64_t c = 0, cb = 0; c < total_cols; c += width, ++cb) {
        Tile t;
        t.tile_id = static_cast<std::int64_t>(tiles.size());
        t.expert = block.expert;
        t.row_begin = r;
        t.row_end = r_end;
        t.col_begin = c;
        t.col_end = std::min(total_cols, c + width);
        t.col_block = cb;
        t.tokens.assign(block.tokens.begin() + r, block.tokens.begin() + r_end);
        tiles.push_back(std::move(t));
      }
    }
  }
  return tiles;
}

std::vector<ReduceChunk> reduce_chunks_for(const std::vector<Tile>& ordered,
                                           const SharedTensorMeta& meta) {
  const std::int64_t blocks = meta.num_col_blocks();
  std::vector<ReduceChunk> chunks;
  for (std::int64_t cb = 0; cb < blocks; ++cb) {
    ReduceChunk rc;
    rc.col_block = cb;
    rc.col_begin = cb * meta.tile_cols;
    rc.col_end = std::min(meta.cols, rc.col_begin + meta.tile_cols);
    std::int64_t last = -1;
    for (std::size_t pos = 0; pos < ordered.size(); ++pos) {
      if (ordered[pos].col_block != cb) continue;
      rc.prerequisites.push_back(ordered[pos].tile_id);
      last = static_cast<std::int64_t>(pos);
    }
    if (last < 0) continue;
    std::sort(rc.prerequisites.begin(), rc.prerequisites.end());
    rc.after_position = last + 1;
    chunks.push_back(std::move(rc));
  }
  return chunks;
}

}  // namespace

std::vector<ExpertBlock> sort_tokens_by_source(const RoutingTable& routing,
                                               std::int64_t rank) {
  check_rank(routing, rank);
  const auto& par = routing.parallel();
  const std::int64_t world = routing.world();
  const std::int64_t per_group = routing.num_experts() / par.ep;
  const std::int64_t first = par.group_of_rank(rank) * per_group;

  std::vector<ExpertBlock> blocks(per_group);
  for (std::int64_t i = 0; i < per_group; ++i) blocks[i].expert = first + i;
  for (std::int64_t t = 0; t < routing.num_tokens(); ++t) {
    const auto& tok = routing.token(t);
    for (auto e : tok.experts) {
      if (e >= first && e < first + per_group) {
        blocks[e - first].tokens.push_back({t, tok.source_rank});
      }
    }
  }
  auto distance = [&](std::int64_t src) {
    return ((src - rank) % world + world) % world;
  };
  for (auto& b : blocks) {
    std::stable_sort(b.tokens.begin(), b.tokens.end(),
                     [&](const TokenRef& a, const TokenRef& c) {
                       return distance(a.source_rank) < distance(c.source_rank);
                     });
  }
  return blocks;
}

TileSchedule resolve_layer0(const RoutingTable& routing, std::int64_t rank,
                            const SharedTensorMeta& meta) {
  meta.validate();
  if (meta.dim != DecomposedDim::kM) {
    throw ConfigError(
        "layer0 shared tensor can only be decomposed along M: each GEMM tile "
        "reduces over the embedding dimension");
  }
  TileSchedule s;
  s.layer = Layer::kLayer0;
  s.rank = rank;
  s.meta = meta;
  s.tiles = enumerate_tiles(sort_tokens_by_source(routing, rank), meta);
  std::vector<std::int64_t> remote(s.tiles.size());
  for (std::size_t i = 0; i < s.tiles.size(); ++i) {
    remote[i] = s.tiles[i].remote_deps(rank);
  }
  // Canonical ids already encode (expert, row, column) order.
  std::vector<std::size_t> order(s.tiles.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return remote[a] < remote[b];
  });
  std::vector<Tile> ordered;
  ordered.reserve(order.size());
  for (auto i : order) ordered.push_back(std::move(s.tiles[i]));
  s.tiles = std::move(ordered);
  return s;
}

TileSchedule resolve_layer1(const RoutingTable& routing, std::int64_t rank,
                            const SharedTensorMeta& meta) {
  meta.validate();
  if (meta.dim != DecomposedDim::kN) {
    throw ConfigError(
        "layer1 shared tensor can only be decomposed along N: the topk "
        "reduction couples rows along M");
  }
  TileSchedule s;
  s.layer = Layer::kLayer1;
  s.rank = rank;
  s.meta = meta;
  auto tiles = enumerate_tiles(sort_tokens_by_source(routing, rank), meta);
  std::stable_sort(tiles.begin(), tiles.end(), [](const Tile& a, const Tile& b) {
    return a.col_block < b.col_block;
  });
  s.tiles = std::move(tiles);
  s.reduce_chunks = reduce_chunks_for(s.tiles, meta);
  return s;
}

TileSchedule naive_layer0(const RoutingTable& routing, std::int64_t rank,
                          const SharedTensorMeta& meta) {
  meta.validate();
  if (meta.dim != DecomposedDim::kM) {
    throw ConfigError("layer0 shared tensor can only be decomposed along M");
  }
  TileSchedule s;
  s.layer = Layer::kLayer0;
  s.rank = rank;
  s.meta = meta;
  s.tiles = enumerate_tiles(sort_tokens_by_source(routing, rank), meta);
  return s;
}

TileSchedule naive_layer1(const RoutingTable& routing, std::int64_t rank,
                          const SharedTensorMeta& meta) {
  meta.validate();
  if (meta.dim != DecomposedDim::kN) {
    throw ConfigError("layer1 shared tensor can only be decomposed along N");
  }
  TileSchedule s;
  s.layer = Layer::kLayer1;
  s.rank = rank;
  s.meta = meta;
  s.tiles = enumerate_tiles(sort_tokens_by_source(routing, rank), meta);
  s.reduce_chunks = reduce_chunks_for(s.tiles, meta);
  // Without rescheduling nothing can be reduced before every expert is done.
  for (auto& rc : s.reduce_chunks) {
    rc.after_position = static_cast<std::int64_t>(s.tiles.size());
  }
  return s;
}

std::string to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::kMissingTile: return "missing tile";
    case ViolationKind::kDuplicateTile: return "duplicate tile";
    case ViolationKind::kUnexpectedTile: return "unexpected tile";
    case ViolationKind::kBadDependency: return "bad dependency";
    case ViolationKind::kMissingReduce: return "missing reduce";
    case ViolationKind::kIncompleteReduce: return "incomplete reduce";
    case ViolationKind::kPrematureReduce: return "premature reduce";
    case ViolationKind::kWrongDimension: return "wrong dimension";
  }
  return "unknown";
}

std::vector<Violation> validate_schedule(const TileSchedule& schedule,
                                         const RoutingTable& routing,
                                         std::int64_t rank) {
  std::vector<Violation> out;
  auto add = [&](ViolationKind k, std::int64_t id, std::string why) {
    out.push_back({k, id, std::move(why)});
  };

  const bool layer0 = schedule.layer == Layer::kLayer0;
  const DecomposedDim want = layer0 ? DecomposedDim::kM : DecomposedDim::kN;
  if (schedule.meta.dim != want) {
    add(ViolationKind::kWrongDimension, -1,
        layer0 ? "layer0 must be decomposed along M"
               : "layer1 must be decomposed along N");
    return out;
  }
  if (rank < 0 || rank >= routing.world() || schedule.rank != rank) {
    add(ViolationKind::kUnexpectedTile, -1, "schedule is for another rank");
    return out;
  }

  const auto blocks = sort_tokens_by_source(routing, rank);
  using Key = std::tuple<std::int64_t, std::int64_t, std::int64_t,
                         std::int64_t, std::int64_t>;
  std::map<Key, const Tile*> expected;
  const auto canonical = enumerate_tiles(blocks, schedule.meta);
  for (const auto& t : canonical) {
    expected[{t.expert, t.row_begin, t.row_end, t.col_begin, t.col_end}] = &t;
  }

  std::set<Key> seen;
  std::set<std::int64_t> ids;
  std::map<std::int64_t, std::int64_t> position_of;  // tile id -> position
  for (std::size_t pos = 0; pos < schedule.tiles.size(); ++pos) {
    const Tile& t = schedule.tiles[pos];
    const Key key{t.expert, t.row_begin, t.row_end, t.col_begin, t.col_end};
    if (!ids.insert(t.tile_id).second || !seen.insert(key).second) {
      add(ViolationKind::kDuplicateTile, t.tile_id,
          "tile scheduled more than once (position " + std::to_string(pos) +
              ")");
      continue;
    }
    position_of[t.tile_id] = static_cast<std::int64_t>(pos);
    const auto it = expected.find(key);
    if (it == expected.end()) {
      add(ViolationKind::kUnexpectedTile, t.tile_id,
          "tile does not match the expected tiling of expert " +
              std::to_string(t.expert));
      continue;
    }
    if (t.tile_id != it->second->tile_id || t.col_block != it->second->col_block) {
      add(ViolationKind::kUnexpectedTile, t.tile_id,
          "tile id or column block does not match the tile at expert " +
              std::to_string(t.expert) + " rows [" + std::to_string(t.row_begin) +
              ", " + std::to_string(t.row_end) + ")");
    }
    for (const auto& ref : t.tokens) {
      const bool in_range = ref.token >= 0 && ref.token < routing.num_tokens();
      const auto* tok = in_range ? &routing.token(ref.token) : nullptr;
      if (tok == nullptr ||
          !std::binary_search(tok->experts.begin(), tok->experts.end(),
                              t.expert) ||
          tok->source_rank != ref.source_rank) {
        add(ViolationKind::kBadDependency, t.tile_id,
            "token " + std::to_string(ref.token) +
                " is not routed to expert " + std::to_string(t.expert) +
                " from rank " + std::to_string(ref.source_rank));
      }
    }
    if (t.tokens != it->second->tokens) {
      add(ViolationKind::kBadDependency, t.tile_id,
          "dependency set differs from the tokens in rows [" +
              std::to_string(t.row_begin) + ", " + std::to_string(t.row_end) +
              ")");
    }
  }
  for (const auto& t : canonical) {
    if (!seen.count({t.expert, t.row_begin, t.row_end, t.col_begin, t.col_end})) {
      add(ViolationKind::kMissingTile, t.tile_id,
          "expert " + std::to_string(t.expert) + " rows [" +
              std::to_string(t.row_begin) + ", " + std::to_string(t.row_end) +
              ") cols [" + std::to_string(t.col_begin) + ", " +
              std::to_string(t.col_end) + ") is never scheduled");
    }
  }

  if (layer0) {
    if (!schedule.reduce_chunks.empty()) {
      add(ViolationKind::kIncompleteReduce, -1,
          "layer0 schedules carry no reduce chunks");
    }
    return out;
  }

  std::map<std::int64_t, std::vector<std::int64_t>> block_tiles;
  for (const auto& t : schedule.tiles) block_tiles[t.col_block].push_back(t.tile_id);
  for (auto& [cb, v] : block_tiles) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  std::map<std::int64_t, int> chunk_count;
  for (const auto& rc : schedule.reduce_chunks) {
    if (++chunk_count[rc.col_block] > 1) {
      add(ViolationKind::kIncompleteReduce, -1,
          "column block " + std::to_string(rc.col_block) +
              " is reduced more than once");
      continue;
    }
    const auto bt = block_tiles.find(rc.col_block);
    std::vector<std::int64_t> prereq = rc.prerequisites;
    std::sort(prereq.begin(), prereq.end());
    if (bt == block_tiles.end() || prereq != bt->second) {
      add(ViolationKind::kIncompleteReduce, -1,
          "reduce chunk " + std::to_string(rc.col_block) +
              " prerequisites differ from the tiles of its column block");
    }
    for (auto id : rc.prerequisites) {
      const auto p = position_of.find(id);
      if (p != position_of.end() && p->second >= rc.after_position) {
        add(ViolationKind::kPrematureReduce, id,
            "reduce chunk " + std::to_string(rc.col_block) +
                " is issued at position " + std::to_string(rc.after_position) +
                " before prerequisite tile at position " +
                std::to_string(p->second));
      }
    }
  }
  for (const auto& [cb, v] : block_tiles) {
    if (!chunk_count.count(cb)) {
      add(ViolationKind::kMissingReduce, -1,
          "column block " + std::to_string(cb) + " is never reduced");
    }
  }
  return out;
}

namespace {

Json meta_to_json(const SharedTensorMeta& m) {
  return Json{{"global_rows", m.global_rows},
              {"cols", m.cols},
              {"dim", m.dim == DecomposedDim::kM ? "M" : "N"},
              {"tile_rows", m.tile_rows},
              {"tile_cols", m.tile_cols},
              {"hidden_cols", m.hidden_cols},
              {"hidden_tile_cols", m.hidden_tile_cols},
              {"dtype_bytes", m.dtype_bytes}};
}

SharedTensorMeta meta_from_json(const Json& j) {
  SharedTensorMeta m;
  m.global_rows = j.at("global_rows").get<std::int64_t>();
  m.cols = j.at("cols").get<std::int64_t>();
  const auto dim = j.at("dim").get<std::string>();
  if (dim != "M" && dim != "N") throw ConfigError("meta: dim must be M or N");
  m.dim = dim == "M" ? DecomposedDim::kM : DecomposedDim::kN;
  m.tile_rows = j.at("tile_rows").get<std::int64_t>();
  m.tile_cols = j.at("tile_cols").get<std::int64_t>();
  m.hidden_cols = j.at("hidden_cols").get<std::int64_t>();
  m.hidden_tile_cols = j.value("hidden_tile_cols", std::int64_t{0});
  m.dtype_bytes = j.value("dtype_bytes", std::int64_t{2});
  m.validate();
  return m;
}

}  // namespace

Json TileSchedule::to_json() const {
  Json j;
  j["layer"] = layer == Layer::kLayer0 ? 0 : 1;
  j["rank"] = rank;
  j["meta"] = meta_to_json(meta);
  Json arr = Json::array();
  for (const auto& t : tiles) {
    Json deps = Json::array();
    for (const auto& d : t.tokens) deps.push_back({d.token, d.source_rank});
    arr.push_back(Json{{"tile_id", t.tile_id},
                       {"expert", t.expert},
                       {"rows", {t.row_begin, t.row_end}},
                       {"cols", {t.col_begin, t.col_end}},
                       {"col_block", t.col_block},
                       {"deps", std::move(deps)}});
  }
  j["tiles"] = std::move(arr);
  if (layer == Layer::kLayer1) {
    Json rcs = Json::array();
    for (const auto& rc : reduce_chunks) {
      rcs.push_back(Json{{"col_block", rc.col_block},
                         {"cols", {rc.col_begin, rc.col_end}},
                         {"after", rc.after_position},
                         {"prereqs", rc.prerequisites}});
    }
    j["reduce_chunks"] = std::move(rcs);
  }
  return j;
}

TileSchedule TileSchedule::from_json(const Json& j) {
  TileSchedule s;
  const auto layer = j.at("layer").get<int>();
  if (layer != 0 && layer != 1) throw ConfigError("schedule: layer must be 0 or 1");
  s.layer = layer == 0 ? Layer::kLayer0 : Layer::kLayer1;
  s.rank = j.at("rank").get<std::int64_t>();
  s.meta = meta_from_json(j.at("meta"));
  for (const auto& jt : j.at("tiles")) {
    Tile t;
    t.tile_id = jt.at("tile_id").get<std::int64_t>();
    t.expert = jt.at("expert").get<std::int64_t>();
    t.row_begin = jt.at("rows").at(0).get<std::int64_t>();
    t.row_end = jt.at("rows").at(1).get<std::int64_t>();
    t.col_begin = jt.at("cols").at(0).get<std::int64_t>();
    t.col_end = jt.at("cols").at(1).get<std::int64_t>();
    t.col_block = jt.at("col_block").get<std::int64_t>();
    for (const auto& d : jt.at("deps")) {
      t.tokens.push_back({d.at(0).get<std::int64_t>(), d.at(1).get<std::int64_t>()});
    }
    s.tiles.push_back(std::move(t));
  }
  if (j.contains("reduce_chunks")) {
    for (const auto& jr : j.at("reduce_chunks")) {
      ReduceChunk rc;
      rc.col_block = jr.at("col_block").get<std::int64_t>();
      rc.col_begin = jr.at("cols").at(0).get<std::int64_t>();
      rc.col_end = jr.at("cols").at(1).get<std::int64_t>();
      rc.after_position = jr.at("after").get<std::int64_t>();
      rc.prerequisites = jr.at("prereqs").get<std::vector<std::int64_t>>();
      s.reduce_chunks.push_back(std::move(rc));
    }
  }
  return s;
}

}  // namespace moesim
