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

#ifndef MOESIM_EXPERIMENT_H_
#define MOESIM_EXPERIMENT_H_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "moesim/moe_config.h"
#include "moesim/overlap_simulator.h"
#include "moesim/workload_assigner.h"

namespace moesim {

enum class Command { kRoute, kRun, kSweep, kVerify, kCompare };

// "fine", "coarse:<c>" or "sequential".
struct ModeSpec {
  enum class Kind { kFine, kCoarse, kSequential };
  Kind kind = Kind::kFine;
  std::int64_t chunks = 1;

  static ModeSpec parse(std::string_view s);
  // Comma-separated list of modes.
  static std::vector<ModeSpec> parse_list(std::string_view s);
  std::string to_string() const;
  bool operator==(const ModeSpec&) const = default;
};

// Everything one subcommand needs. Values come from the subcommand's
// defaults, then a JSON config file, then command-line flags.
//
// Config file:
//   {"model": "<preset>" | {"L", "E", "topk", "N", "K", "dtype_bytes"},
//    "parallel": {"tp", "ep"},
//    "workload": {"M", "seed", "std"},
//    "cost": "<preset>" | {CostModel fields},
//    "sim": {"n", "n_c", "tile_rows", "tile_cols", "hidden_tile_cols", "mode",
//            "rank", "phase", "stride", "jobs", "auto_split"},
//    "routing": "<routing.json>",
//    "output": {"dir", "metadata"},
//    "verify": {"instances"}}
struct ExperimentConfig {
  std::string model_preset = "mixtral-8x7b";  // empty for an inline model
  ModelConfig model;
  ParallelSpec parallel{1, 8};
  WorkloadSpec workload{4096, 0, 0.0};
  CostModel cost;
  std::int64_t n = 132;
  std::int64_t n_c = 24;
  std::int64_t tile_rows = 128;
  std::int64_t tile_cols = 0;         // 0: default_tile_cols(N)
  std::int64_t hidden_tile_cols = 0;  // 0: default_tile_cols(K / tp)
  std::vector<ModeSpec> modes{ModeSpec{}};
  std::int64_t rank = 0;
  SweepPhase phase = SweepPhase::kBoth;
  std::int64_t stride = 1;
  std::int64_t jobs = 1;
  bool auto_split = false;
  std::string routing_path;  // load the routing instead of generating it
  std::string out_dir = ".";
  std::string metadata_path;  // default: <out_dir>/metadata.json
  std::int64_t verify_instances = 20;
  std::optional<std::uint64_t> fuzz_seed;
  bool dump_schedule = false;

  static ExperimentConfig defaults(Command command);
  // Overlays the fields present in `j`; throws ConfigError on bad values.
  void apply_json(const Json& j);
  void set_model_preset(const std::string& name);
  void set_cost_preset(const std::string& name);
  void validate() const;

  std::int64_t effective_tile_cols() const;
  std::int64_t effective_hidden_tile_cols() const;
  std::string effective_metadata_path() const;
  SharedTensorMeta layer0_meta() const;
  SharedTensorMeta layer1_meta() const;
  SweepConfig sweep_config() const;
  // Echo of the experiment inputs (output paths excluded).
  Json to_json() const;
};

struct ModeOutcome {
  ModeSpec mode;
  SimResult result;
};

// Routing named by the config: loaded from routing_path or generated.
RoutingTable experiment_routing(const ExperimentConfig& config);

// Simulates one mode on the configured rank.
SimResult run_mode(const ExperimentConfig& config, const RoutingTable& routing,
                   const ModeSpec& mode, const KernelSplit& split);

// Split for `run`: from metadata when auto_split is set, else n / n_c.
KernelSplit experiment_split(const ExperimentConfig& config);

// Entry point of the moesim tool. Exit codes: 0 success, 1 internal error or
// failed verification, 2 invalid or infeasible configuration.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace moesim

#endif  // MOESIM_EXPERIMENT_H_
