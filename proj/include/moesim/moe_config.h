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

#ifndef MOESIM_MOE_CONFIG_H_
#define MOESIM_MOE_CONFIG_H_

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace moesim {

using Json = nlohmann::ordered_json;

// Static shape of an MoE model. Field names follow the usual symbol table:
// L layers, E experts, topk experts per token, N embedding size, K expert
// hidden size.
struct ModelConfig {
  std::int64_t L = 1;
  std::int64_t E = 1;
  std::int64_t topk = 1;
  std::int64_t N = 1;
  std::int64_t K = 1;
  std::int64_t dtype_bytes = 2;

  // Throws ConfigError when an invariant does not hold.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Returns the named built-in model ("mixtral-8x7b", "qwen2-moe",
// "phi-3.5-moe"). Throws ConfigError for unknown names.
ModelConfig model_preset(std::string_view name);
std::vector<std::string> model_preset_names();

// Hybrid expert/tensor parallelism. Ranks are laid out EP-major: EP group g
// holds ranks [g*tp, (g+1)*tp) and rank r has TP index r % tp.
struct ParallelSpec {
  std::int64_t tp = 1;
  std::int64_t ep = 1;

  std::int64_t world() const { return tp * ep; }
  std::int64_t group_of_rank(std::int64_t rank) const { return rank / tp; }
  std::int64_t tp_index(std::int64_t rank) const { return rank % tp; }

  void validate() const;
  // Divisibility checks against a model (E % ep, K % tp).
  void validate_for(const ModelConfig& model) const;

  bool operator==(const ParallelSpec&) const = default;
};

struct WorkloadSpec {
  std::int64_t M = 0;
  std::uint64_t seed = 0;
  double target_std = 0.0;

  void validate() const;

  bool operator==(const WorkloadSpec&) const = default;
};

struct ExpertPlacement {
  std::int64_t expert = 0;
  std::int64_t ep_group = 0;
  std::vector<std::int64_t> ranks;  // every TP rank of the group
  std::int64_t hidden_shard = 0;    // K / tp columns held per rank
};

std::vector<ExpertPlacement> expert_placement(const ModelConfig& model,
                                              const ParallelSpec& par);

// Experts [first, last) resident on every rank of `ep_group`.
struct ExpertRange {
  std::int64_t first = 0;
  std::int64_t last = 0;
};
ExpertRange experts_of_group(const ModelConfig& model, const ParallelSpec& par,
                             std::int64_t ep_group);

struct TokenRoute {
  std::int64_t source_rank = 0;
  std::vector<std::int64_t> experts;  // topk distinct ids, ascending

  bool operator==(const TokenRoute&) const = default;
};

// Gate decisions for one forward pass. Token t lives on source rank
// min(t / (M / W), W - 1) before dispatch.
class RoutingTable {
 public:
  RoutingTable() = default;
  // Builds a table from explicit per-token expert lists. Expert lists are
  // sorted; source ranks follow the contiguous pre-distribution rule.
  // Throws ConfigError on duplicate or out-of-range experts.
  RoutingTable(const ModelConfig& model, const ParallelSpec& par,
               std::vector<std::vector<std::int64_t>> experts_per_token);

  std::int64_t num_tokens() const {
    return static_cast<std::int64_t>(tokens_.size());
  }
  std::int64_t num_experts() const { return num_experts_; }
  std::int64_t topk() const { return topk_; }
  const ParallelSpec& parallel() const { return par_; }
  std::int64_t world() const { return par_.world(); }

  const std::vector<TokenRoute>& tokens() const { return tokens_; }
  const TokenRoute& token(std::int64_t t) const { return tokens_[t]; }

  const std::vector<std::int64_t>& expert_counts() const {
    return expert_counts_;
  }
  // transfer_counts()[s][d]: distinct tokens with source rank s that rank d
  // consumes (a token routed to several experts of one EP group counts once).
  const std::vector<std::vector<std::int64_t>>& transfer_counts() const {
    return transfer_counts_;
  }

  std::int64_t ep_group_of_expert(std::int64_t e) const {
    return e / (num_experts_ / par_.ep);
  }

  // Population std of count(e) / (M * topk); 0 for an empty table.
  double fraction_std() const;

  Json to_json() const;
  static RoutingTable from_json(const Json& j);

  bool operator==(const RoutingTable&) const = default;

 private:
  void derive();

  std::int64_t num_experts_ = 1;
  std::int64_t topk_ = 1;
  ParallelSpec par_;
  std::vector<TokenRoute> tokens_;
  std::vector<std::int64_t> expert_counts_;
  std::vector<std::vector<std::int64_t>> transfer_counts_;
};

std::int64_t source_rank_of(std::int64_t token, std::int64_t num_tokens,
                            std::int64_t world);

// Largest fraction std attainable for (E, topk): topk experts take every
// token and the rest receive nothing.
double max_fraction_std(std::int64_t num_experts, std::int64_t topk);

// Seeded synthetic gate. Per-expert loads follow softmax(temperature * g)
// with g ~ N(0, 1) fixed by the seed; the temperature is bisected until the
// fraction std hits wl.target_std. Token-to-expert pairing is randomized by
// the seed while the per-expert counts are held exactly.
RoutingTable build_routing(const ModelConfig& model, const ParallelSpec& par,
                           const WorkloadSpec& wl);

// Communication buffer bytes per device: dtype_bytes * M * N.
std::int64_t buffer_bytes(const ModelConfig& model, std::int64_t num_tokens);

Json to_json(const ModelConfig& m);
Json to_json(const ParallelSpec& p);
Json to_json(const WorkloadSpec& w);
ModelConfig model_from_json(const Json& j);
ParallelSpec parallel_from_json(const Json& j);
WorkloadSpec workload_from_json(const Json& j);

}  // namespace moesim

#endif  // MOESIM_MOE_CONFIG_H_
