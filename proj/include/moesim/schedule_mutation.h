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

#ifndef MOESIM_SCHEDULE_MUTATION_H_
#define MOESIM_SCHEDULE_MUTATION_H_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moesim/dependency_resolver.h"
#include "moesim/random.h"

namespace moesim {

// Single corruptions of a valid schedule. Each one leaves a schedule that
// validate_schedule must reject.
enum class MutationKind {
  kDropTile,
  kDuplicateTile,
  kDropDependency,
  kForeignDependency,
  kShiftRows,
  kWrongExpert,
  kRelabelTile,
  kWrongDimension,
  kDropReduce,        // layer1 only
  kDropPrerequisite,  // layer1 only
  kEarlyReduce,       // layer1 only
};

std::string to_string(MutationKind kind);

struct Mutation {
  MutationKind kind = MutationKind::kDropTile;
  std::int64_t tile_id = -1;
  std::string description;
};

// Kinds that can be applied to `schedule` (empty for a tile-less schedule).
std::vector<MutationKind> applicable_mutations(const TileSchedule& schedule);

// Applies `kind` at a position drawn from `rng`; nullopt when not applicable.
std::optional<Mutation> mutate_schedule(TileSchedule& schedule, MutationKind kind,
                                        SplitMix64& rng);

}  // namespace moesim

#endif  // MOESIM_SCHEDULE_MUTATION_H_
