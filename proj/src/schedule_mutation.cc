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

#include "moesim/schedule_mutation.h"

#include <algorithm>
#include <limits>

namespace moesim {

std::string to_string(MutationKind kind) {
  switch (kind) {
    case MutationKind::kDropTile:
      return "drop tile";
    case MutationKind::kDuplicateTile:
      return "duplicate tile";
    case MutationKind::kDropDependency:
      return "drop dependency";
    case MutationKind::kForeignDependency:
      return "foreign dependency";
    case MutationKind::kShiftRows:
      return "shift rows";
    case MutationKind::kWrongExpert:
      return "wrong expert";
    case MutationKind::kRelabelTile:
      return "relabel tile";
    case MutationKind::kWrongDimension:
      return "wrong dimension";
    case MutationKind::kDropReduce:
      return "drop reduce";
    case MutationKind::kDropPrerequisite:
      return "drop prerequisite";
    case MutationKind::kEarlyReduce:
      break;
  }
  return "early reduce";
}

std::vector<MutationKind> applicable_mutations(const TileSchedule& s) {
  if (s.tiles.empty()) return {};
  std::vector<MutationKind> kinds = {
      MutationKind::kDropTile,       MutationKind::kDuplicateTile,
      MutationKind::kDropDependency, MutationKind::kForeignDependency,
      MutationKind::kShiftRows,      MutationKind::kWrongExpert,
      MutationKind::kRelabelTile,    MutationKind::kWrongDimension};
  if (s.layer == Layer::kLayer1 && !s.reduce_chunks.empty()) {
    kinds.push_back(MutationKind::kDropReduce);
    kinds.push_back(MutationKind::kDropPrerequisite);
    kinds.push_back(MutationKind::kEarlyReduce);
  }
  return kinds;
}

std::optional<Mutation> mutate_schedule(TileSchedule& s, MutationKind kind,
                                        SplitMix64& rng) {
  const auto kinds = applicable_mutations(s);
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) return std::nullopt;

  const auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.below(n)); };
  Mutation m;
  m.kind = kind;
  const std::size_t pos = pick(s.tiles.size());
  Tile& t = s.tiles[pos];
  m.tile_id = t.tile_id;
  const std::string where = "tile " + std::to_string(t.tile_id) + " at position " +
                            std::to_string(pos);

  switch (kind) {
    case MutationKind::kDropTile:
      s.tiles.erase(s.tiles.begin() + static_cast<std::ptrdiff_t>(pos));
      m.description = "removed " + where;
      break;
    case MutationKind::kDuplicateTile: {
      const Tile copy = t;
      const std::size_t at = pick(s.tiles.size() + 1);
      s.tiles.insert(s.tiles.begin() + static_cast<std::ptrdiff_t>(at), copy);
      m.description = "repeated " + where + " at position " + std::to_string(at);
      break;
    }
    case MutationKind::kDropDependency: {
      const std::size_t i = pick(t.tokens.size());
      m.description = "removed token " + std::to_string(t.tokens[i].token) + " from " + where;
      t.tokens.erase(t.tokens.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
    case MutationKind::kForeignDependency:
      t.tokens.push_back({std::numeric_limits<std::int32_t>::max(), 0});
      m.description = "added an unrouted token to " + where;
      break;
    case MutationKind::kShiftRows:
      ++t.row_end;
      m.description = "extended the row range of " + where;
      break;
    case MutationKind::kWrongExpert:
      ++t.expert;
      m.description = "moved " + where + " to expert " + std::to_string(t.expert);
      break;
    case MutationKind::kRelabelTile: {
      std::int64_t top = 0;
      for (const auto& x : s.tiles) top = std::max(top, x.tile_id);
      t.tile_id = top + 1;
      m.description = "relabelled " + where + " as " + std::to_string(t.tile_id);
      break;
    }
    case MutationKind::kWrongDimension:
      s.meta.dim = s.meta.dim == DecomposedDim::kM ? DecomposedDim::kN : DecomposedDim::kM;
      m.tile_id = -1;
      m.description = "flipped the decomposed dimension";
      break;
    case MutationKind::kDropReduce: {
      const std::size_t c = pick(s.reduce_chunks.size());
      m.tile_id = -1;
      m.description = "removed the reduce of column block " +
                      std::to_string(s.reduce_chunks[c].col_block);
      s.reduce_chunks.erase(s.reduce_chunks.begin() + static_cast<std::ptrdiff_t>(c));
      break;
    }
    case MutationKind::kDropPrerequisite: {
      auto& rc = s.reduce_chunks[pick(s.reduce_chunks.size())];
      const std::size_t i = pick(rc.prerequisites.size());
      m.tile_id = rc.prerequisites[i];
      m.description = "removed prerequisite tile " + std::to_string(m.tile_id) +
                      " from the reduce of column block " + std::to_string(rc.col_block);
      rc.prerequisites.erase(rc.prerequisites.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
    case MutationKind::kEarlyReduce: {
      auto& rc = s.reduce_chunks[pick(s.reduce_chunks.size())];
      std::int64_t first = static_cast<std::int64_t>(s.tiles.size());
      for (std::size_t i = 0; i < s.tiles.size(); ++i) {
        if (std::binary_search(rc.prerequisites.begin(), rc.prerequisites.end(),
                               s.tiles[i].tile_id)) {
          first = std::min(first, static_cast<std::int64_t>(i));
        }
      }
      m.tile_id = -1;
      m.description = "issued the reduce of column block " + std::to_string(rc.col_block) +
                      " at position " + std::to_string(first) + " instead of " +
                      std::to_string(rc.after_position);
      rc.after_position = first;
      break;
    }
  }
  return m;
}

}  // namespace moesim
