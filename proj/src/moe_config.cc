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

#include "moesim/moe_config.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "moesim/errors.h"
#include "moesim/random.h"

namespace moesim {

InfeasibleStdError::InfeasibleStdError(double requested, double achievable_max)
    : ConfigError([&] {
        std::ostringstream os;
        os << "target std " << requested
           << " is infeasible; maximum achievable std is " << achievable_max;
        return os.str();
      }()),
      requested_(requested),
      achievable_max_(achievable_max) {}

void ModelConfig::validate() const {
  if (L < 1) throw ConfigError("model: L must be >= 1");
  if (E < 1) throw ConfigError("model: E must be >= 1");
  if (topk < 1 || topk > E) throw ConfigError("model: need 1 <= topk <= E");
  if (N < 1) throw ConfigError("model: N must be >= 1");
  if (K < 1) throw ConfigError("model: K must be >= 1");
  if (dtype_bytes != 1 && dtype_bytes != 2 && dtype_bytes != 4 &&
      dtype_bytes != 8) {
    throw ConfigError("model: dtype_bytes must be one of 1, 2, 4, 8");
  }
}

namespace {

struct NamedModel {
  const char* name;
  ModelConfig config;
};

const NamedModel kModelPresets[] = {
    {"mixtral-8x7b", {32, 8, 2, 4096, 14336, 2}},
    {"qwen2-moe", {24, 64, 4, 2048, 1408, 2}},
    {"phi-3.5-moe", {32, 16, 2, 4096, 6400, 2}},
};

}  // namespace

ModelConfig model_preset(std::string_view name) {
  for (const auto& p : kModelPresets) {
    if (name == p.name) return p.config;
  }
  throw ConfigError("unknown model preset '" + std::string(name) + "'");
}

std::vector<std::string> model_preset_names() {
  std::vector<std::string> names;
  for (const auto& p : kModelPresets) names.emplace_back(p.name);
  return names;
}

void ParallelSpec::validate() const {
  if (tp < 1) throw ConfigError("parallel: tp must be >= 1");
  if (ep < 1) throw ConfigError("parallel: ep must be >= 1");
}

void ParallelSpec::validate_for(const ModelConfig& model) const {
  validate();
  if (model.E % ep != 0) {
    throw ConfigError("parallel: E=" + std::to_string(model.E) +
                      " is not divisible by ep=" + std::to_string(ep));
  }
  if (model.K % tp != 0) {
    throw ConfigError("parallel: K=" + std::to_string(model.K) +
                      " is not divisible by tp=" + std::to_string(tp));
  }
}

void WorkloadSpec::validate() const {
  if (M < 0) throw ConfigError("workload: M must be >= 0");
  if (!(target_std >= 0.0) || !std::isfinite(target_std)) {
    throw ConfigError("workload: std must be a finite value >= 0");
  }
}

std::vector<ExpertPlacement> expert_placement(const ModelConfig& model,
                                              const ParallelSpec& par) {
  model.validate();
  par.validate_for(model);
  const std::int64_t per_group = model.E / par.ep;
  std::vector<ExpertPlacement> out;
  out.reserve(model.E);
  for (std::int64_t e = 0; e < model.E; ++e) {
    ExpertPlacement p;
    p.expert = e;
    p.ep_group = e / per_group;
    for (std::int64_t i = 0; i < par.tp; ++i) {
      p.ranks.push_back(p.ep_group * par.tp + i);
    }
    p.hidden_shard = model.K / par.tp;
    out.push_back(std::move(p));
  }
  return out;
}

ExpertRange experts_of_group(const ModelConfig& model, const ParallelSpec& par,
                             std::int64_t ep_group) {
  const std::int64_t per_group = model.E / par.ep;
  return {ep_group * per_group, (ep_group + 1) * per_group};
}

std::int64_t source_rank_of(std::int64_t token, std::int64_t num_tokens,
                            std::int64_t world) {
  const std::int64_t per_rank = num_tokens / world;
  if (per_rank == 0) return world - 1;
  return std::min(token / per_rank, world - 1);
}

RoutingTable::RoutingTable(
    const ModelConfig& model, const ParallelSpec& par,
    std::vector<std::vector<std::int64_t>> experts_per_token)
    : num_experts_(model.E), topk_(model.topk), par_(par) {
  model.validate();
  par.validate_for(model);
  const auto m = static_cast<std::int64_t>(experts_per_token.size());
  tokens_.reserve(experts_per_token.size());
  for (std::int64_t t = 0; t < m; ++t) {
    auto& ex = experts_per_token[t];
    std::sort(ex.begin(), ex.end());
    if (static_cast<std::int64_t>(ex.size()) != topk_) {
      throw ConfigError("routing: token " + std::to_string(t) + " lists " +
                        std::to_string(ex.size()) + " experts, expected " +
                        std::to_string(topk_));
    }
    if (std::adjacent_find(ex.begin(), ex.end()) != ex.end()) {
      throw ConfigError("routing: token " + std::to_string(t) +
                        " repeats an expert");
    }
    if (ex.front() < 0 || ex.back() >= num_experts_) {
      throw ConfigError("routing: token " + std::to_string(t) +
                        " has an expert id outside [0, E)");
    }
    tokens_.push_back({source_rank_of(t, m, par_.world()), std::move(ex)});
  }
  derive();
}

void RoutingTable::derive() {
  const std::int64_t world = par_.world();
  expert_counts_.assign(num_experts_, 0);
  transfer_counts_.assign(world, std::vector<std::int64_t>(world, 0));
  std::vector<char> touched(par_.ep, 0);
  for (const auto& tok : tokens_) {
    std::fill(touched.begin(), touched.end(), 0);
    for (auto e : tok.experts) {
      ++expert_counts_[e];
      touched[ep_group_of_expert(e)] = 1;
    }
    for (std::int64_t g = 0; g < par_.ep; ++g) {
      if (!touched[g]) continue;
      for (std::int64_t i = 0; i < par_.tp; ++i) {
        ++transfer_counts_[tok.source_rank][g * par_.tp + i];
      }
    }
  }
}

namespace {

double fraction_std_of(const std::vector<std::int64_t>& counts,
                       std::int64_t slots) {
  if (slots <= 0 || counts.empty()) return 0.0;
  const double n = static_cast<double>(counts.size());
  const double mean = 1.0 / n;
  double acc = 0.0;
  for (auto c : counts) {
    const double f = static_cast<double>(c) / static_cast<double>(slots);
    acc += (f - mean) * (f - mean);
  }
  return std::sqrt(acc / n);
}

}  // namespace

double RoutingTable::fraction_std() const {
  return fraction_std_of(expert_counts_, num_tokens() * topk_);
}

Json RoutingTable::to_json() const {
  Json j;
  j["num_tokens"] = num_tokens();
  j["num_experts"] = num_experts_;
  j["topk"] = topk_;
  j["parallel"] = moesim::to_json(par_);
  j["expert_counts"] = expert_counts_;
  j["fraction_std"] = fraction_std();
  Json toks = Json::array();
  for (const auto& t : tokens_) {
    toks.push_back(Json{{"src", t.source_rank}, {"experts", t.experts}});
  }
  j["tokens"] = std::move(toks);
  return j;
}

RoutingTable RoutingTable::from_json(const Json& j) {
  ModelConfig model;
  model.E = j.at("num_experts").get<std::int64_t>();
  model.topk = j.at("topk").get<std::int64_t>();
  const ParallelSpec par = parallel_from_json(j.at("parallel"));
  // Only E and topk matter for a routing table; pick a K the TP size divides.
  model.K = par.tp;
  std::vector<std::vector<std::int64_t>> experts;
  for (const auto& t : j.at("tokens")) {
    experts.push_back(t.at("experts").get<std::vector<std::int64_t>>());
  }
  RoutingTable rt(model, par, std::move(experts));
  const auto& toks = j.at("tokens");
  for (std::size_t t = 0; t < toks.size(); ++t) {
    if (toks[t].at("src").get<std::int64_t>() != rt.tokens_[t].source_rank) {
      throw ConfigError("routing: token " + std::to_string(t) +
                        " has a source rank that breaks the contiguous "
                        "pre-distribution");
    }
  }
  return rt;
}

double max_fraction_std(std::int64_t num_experts, std::int64_t topk) {
  const double e = static_cast<double>(num_experts);
  const double k = static_cast<double>(topk);
  const double var = 1.0 / (k * e) - 1.0 / (e * e);
  return var > 0.0 ? std::sqrt(var) : 0.0;
}

namespace {

// Per-expert load weights at a given temperature, water-filled so that no
// expert exceeds 1/topk (a token cannot pick the same expert twice).
std::vector<double> load_weights(const std::vector<double>& gauss,
                                 double temperature, std::int64_t topk) {
  const std::size_t n = gauss.size();
  std::vector<double> logits(n);
  for (std::size_t i = 0; i < n; ++i) logits[i] = temperature * gauss[i];
  const double cap = 1.0 / static_cast<double>(topk);
  std::vector<char> capped(n, 0);
  std::vector<double> w(n, 0.0);
  for (;;) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!capped[i]) top = std::max(top, logits[i]);
    }
    double sum = 0.0;
    std::size_t capped_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (capped[i]) {
        ++capped_count;
        continue;
      }
      w[i] = std::exp(logits[i] - top);
      sum += w[i];
    }
    const double free_mass = 1.0 - static_cast<double>(capped_count) * cap;
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (capped[i]) {
        w[i] = cap;
        continue;
      }
      w[i] = w[i] / sum * free_mass;
      if (w[i] > cap) {
        capped[i] = 1;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return w;
}

// Largest-remainder apportionment of `slots` by `w`; no count exceeds `cap`.
std::vector<std::int64_t> apportion(const std::vector<double>& w,
                                    std::int64_t slots, std::int64_t cap) {
  const std::size_t n = w.size();
  std::vector<std::int64_t> counts(n);
  std::vector<double> rem(n);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = w[i] * static_cast<double>(slots);
    const auto base = std::min<std::int64_t>(
        cap, static_cast<std::int64_t>(std::floor(exact)));
    counts[i] = base;
    rem[i] = exact - static_cast<double>(base);
    assigned += base;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  std::int64_t left = slots - assigned;
  while (left > 0) {
    bool progressed = false;
    for (auto i : order) {
      if (left == 0) break;
      if (counts[i] < cap) {
        ++counts[i];
        --left;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return counts;
}

// Pairs tokens with experts so that every token gets exactly topk distinct
// experts and expert e gets counts[e] tokens. Each expert (largest first)
// takes the tokens with the most remaining demand; ties are broken by the
// seeded generator.
std::vector<std::vector<std::int64_t>> assign_tokens(
    const std::vector<std::int64_t>& counts, std::int64_t num_tokens,
    std::int64_t topk, SplitMix64& rng) {
  std::vector<std::vector<std::int64_t>> experts(num_tokens);
  // buckets[d] holds tokens whose remaining demand is d.
  std::vector<std::vector<std::int64_t>> buckets(topk + 1);
  buckets[topk].resize(num_tokens);
  std::iota(buckets[topk].begin(), buckets[topk].end(), 0);

  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return counts[a] > counts[b];
  });

  for (auto e : order) {
    std::int64_t need = counts[e];
    std::vector<std::vector<std::int64_t>> moved(topk + 1);
    for (std::int64_t d = topk; d >= 1 && need > 0; --d) {
      auto& bucket = buckets[d];
      const auto size = static_cast<std::int64_t>(bucket.size());
      const std::int64_t take = std::min(need, size);
      // Partial Fisher-Yates: pick `take` random members to the back.
      for (std::int64_t i = 0; i < take; ++i) {
        const std::int64_t last = size - 1 - i;
        const auto j = static_cast<std::int64_t>(rng.below(last + 1));
        std::swap(bucket[j], bucket[last]);
      }
      for (std::int64_t i = 0; i < take; ++i) {
        const std::int64_t tok = bucket.back();
        bucket.pop_back();
        experts[tok].push_back(static_cast<std::int64_t>(e));
        moved[d - 1].push_back(tok);
      }
      need -= take;
    }
    if (need > 0) throw ConfigError("routing: expert load exceeds token supply");
    for (std::int64_t d = 0; d < topk; ++d) {
      auto& dst = buckets[d];
      dst.insert(dst.end(), moved[d].begin(), moved[d].end());
    }
  }
  return experts;
}

}  // namespace

RoutingTable build_routing(const ModelConfig& model, const ParallelSpec& par,
                           const WorkloadSpec& wl) {
  model.validate();
  par.validate_for(model);
  wl.validate();
  const double max_std = max_fraction_std(model.E, model.topk);
  if (wl.target_std > max_std + 1e-12) {
    throw InfeasibleStdError(wl.target_std, max_std);
  }
  if (wl.M == 0) return RoutingTable(model, par, {});

  SplitMix64 rng(wl.seed);
  std::vector<double> gauss(model.E);
  for (auto& g : gauss) g = rng.normal();

  const std::int64_t slots = wl.M * model.topk;
  auto counts_at = [&](double temperature) {
    return apportion(load_weights(gauss, temperature, model.topk), slots, wl.M);
  };

  std::vector<std::int64_t> best = counts_at(0.0);
  if (wl.target_std > 0.0) {
    double best_err = std::abs(fraction_std_of(best, slots) - wl.target_std);
    auto consider = [&](double temperature) {
      auto c = counts_at(temperature);
      const double s = fraction_std_of(c, slots);
      const double err = std::abs(s - wl.target_std);
      if (err < best_err) {
        best_err = err;
        best = std::move(c);
      }
      return s;
    };
    double lo = 0.0;
    double hi = 1.0;
    while (consider(hi) < wl.target_std && hi < 1e6) {
      lo = hi;
      hi *= 2.0;
    }
    for (int it = 0; it < 200 && best_err > 1e-7; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (consider(mid) < wl.target_std) {
        lo = mid;
      } else {
        hi = mid;
      }
      if (hi - lo < 1e-12) break;
    }
  }

  auto experts = assign_tokens(best, wl.M, model.topk, rng);
  return RoutingTable(model, par, std::move(experts));
}

std::int64_t buffer_bytes(const ModelConfig& model, std::int64_t num_tokens) {
  return model.dtype_bytes * num_tokens * model.N;
}

Json to_json(const ModelConfig& m) {
  return Json{{"L", m.L},   {"E", m.E}, {"topk", m.topk},
              {"N", m.N},   {"K", m.K}, {"dtype_bytes", m.dtype_bytes}};
}

Json to_json(const ParallelSpec& p) { return Json{{"tp", p.tp}, {"ep", p.ep}}; }

Json to_json(const WorkloadSpec& w) {
  return Json{{"M", w.M}, {"seed", w.seed}, {"std", w.target_std}};
}

ModelConfig model_from_json(const Json& j) {
  ModelConfig m;
  m.L = j.value("L", m.L);
  m.E = j.at("E").get<std::int64_t>();
  m.topk = j.at("topk").get<std::int64_t>();
  m.N = j.at("N").get<std::int64_t>();
  m.K = j.at("K").get<std::int64_t>();
  m.dtype_bytes = j.value("dtype_bytes", m.dtype_bytes);
  m.validate();
  return m;
}

ParallelSpec parallel_from_json(const Json& j) {
  ParallelSpec p;
  p.tp = j.value("tp", p.tp);
  p.ep = j.value("ep", p.ep);
  p.validate();
  return p;
}

WorkloadSpec workload_from_json(const Json& j) {
  WorkloadSpec w;
  w.M = j.value("M", w.M);
  w.seed = j.value("seed", w.seed);
  w.target_std = j.value("std", w.target_std);
  w.validate();
  return w;
}

}  // namespace moesim
