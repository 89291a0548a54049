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

#include "moesim/workload_assigner.h"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <thread>

#include "moesim/dependency_resolver.h"
#include "moesim/errors.h"

namespace moesim {

std::int64_t m_bucket(std::int64_t M) {
  std::int64_t b = 1;
  while (b < M) b <<= 1;
  return b;
}

bool SplitKey::compatible(const SplitKey& o) const {
  return tp == o.tp && ep == o.ep && num_experts == o.num_experts &&
         topk == o.topk && N == o.N && K == o.K && cost_preset == o.cost_preset &&
         n == o.n;
}

Json SplitKey::to_json() const {
  return Json{{"m_bucket", m_bucket}, {"tp", tp},     {"ep", ep},
              {"E", num_experts},     {"topk", topk}, {"N", N},
              {"K", K},               {"cost_preset", cost_preset},
              {"n", n}};
}

SplitKey SplitKey::from_json(const Json& j) {
  SplitKey k;
  k.m_bucket = j.at("m_bucket").get<std::int64_t>();
  k.tp = j.at("tp").get<std::int64_t>();
  k.ep = j.at("ep").get<std::int64_t>();
  k.num_experts = j.at("E").get<std::int64_t>();
  k.topk = j.at("topk").get<std::int64_t>();
  k.N = j.at("N").get<std::int64_t>();
  k.K = j.at("K").get<std::int64_t>();
  k.cost_preset = j.at("cost_preset").get<std::string>();
  k.n = j.value("n", std::int64_t{132});
  return k;
}

void SplitMetadata::upsert(SplitRecord record) {
  for (auto& r : records) {
    if (r.key == record.key) {
      r = std::move(record);
      return;
    }
  }
  records.push_back(std::move(record));
}

Json SplitMetadata::to_json() const {
  Json recs = Json::array();
  for (const auto& r : records) {
    Json curve = Json::array();
    for (const auto& p : r.curve) curve.push_back(Json::array({p.n_c, p.latency_ns}));
    recs.push_back(Json{{"key", r.key.to_json()},
                        {"optimal_n_c", r.optimal_n_c},
                        {"latency_ns", r.latency_ns},
                        {"curve", std::move(curve)}});
  }
  return Json{{"version", 1}, {"records", std::move(recs)}};
}

SplitMetadata SplitMetadata::from_json(const Json& j) {
  SplitMetadata m;
  try {
    for (const auto& r : j.at("records")) {
      SplitRecord rec;
      rec.key = SplitKey::from_json(r.at("key"));
      rec.optimal_n_c = r.at("optimal_n_c").get<std::int64_t>();
      rec.latency_ns = r.at("latency_ns").get<std::int64_t>();
      for (const auto& p : r.at("curve")) {
        rec.curve.push_back({p.at(0).get<std::int64_t>(), p.at(1).get<std::int64_t>()});
      }
      m.records.push_back(std::move(rec));
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed split metadata: ") + e.what());
  }
  return m;
}

SplitMetadata SplitMetadata::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read split metadata '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError("cannot parse split metadata '" + path + "': " + e.what());
  }
  return from_json(j);
}

void SplitMetadata::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp + "'");
    out << to_json().dump(2) << '\n';
    if (!out) throw ConfigError("cannot write '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw ConfigError("cannot replace '" + path + "'");
  }
}

SweepPhase parse_sweep_phase(std::string_view s) {
  if (s == "layer0") return SweepPhase::kLayer0;
  if (s == "layer1") return SweepPhase::kLayer1;
  if (s == "both") return SweepPhase::kBoth;
  throw ConfigError("unknown sweep phase '" + std::string(s) +
                    "' (expected layer0, layer1 or both)");
}

std::string to_string(SweepPhase p) {
  switch (p) {
    case SweepPhase::kLayer0:
      return "layer0";
    case SweepPhase::kLayer1:
      return "layer1";
    case SweepPhase::kBoth:
      break;
  }
  return "both";
}

SplitKey SweepConfig::key() const {
  SplitKey k;
  k.m_bucket = moesim::m_bucket(workload.M);
  k.tp = parallel.tp;
  k.ep = parallel.ep;
  k.num_experts = model.E;
  k.topk = model.topk;
  k.N = model.N;
  k.K = model.K;
  k.cost_preset = cost.name;
  k.n = n;
  return k;
}

std::vector<std::int64_t> sweep_points(std::int64_t n, std::int64_t stride) {
  if (n < 2) throw ConfigError("sweep: n must be >= 2");
  if (stride < 1) throw ConfigError("sweep: stride must be >= 1");
  std::vector<std::int64_t> pts;
  for (std::int64_t c = 1; c <= n - 1; c += stride) pts.push_back(c);
  if (pts.back() != n - 1) pts.push_back(n - 1);
  return pts;
}

SplitRecord sweep_split(const SweepConfig& config) {
  const auto points = sweep_points(config.n, config.stride);
  config.parallel.validate_for(config.model);
  config.cost.validate();
  const auto routing = build_routing(config.model, config.parallel, config.workload);
  const std::int64_t M = config.workload.M;
  const std::int64_t tile_cols =
      config.tile_cols > 0 ? config.tile_cols : default_tile_cols(config.model.N);
  const std::int64_t hidden_tile_cols =
      config.hidden_tile_cols > 0
          ? config.hidden_tile_cols
          : default_tile_cols(config.model.K / config.parallel.tp);

  std::optional<TileSchedule> s0;
  std::optional<TileSchedule> s1;
  if (config.phase != SweepPhase::kLayer1) {
    s0 = resolve_layer0(routing, config.rank,
                        SharedTensorMeta::layer0(config.model, config.parallel, M,
                                                 config.tile_rows, hidden_tile_cols));
  }
  if (config.phase != SweepPhase::kLayer0) {
    s1 = resolve_layer1(routing, config.rank,
                        SharedTensorMeta::layer1(config.model, config.parallel, M,
                                                 tile_cols, config.tile_rows));
  }

  // Validate once; every swept split simulates the same schedules.
  build_problem(s0 ? &*s0 : nullptr, s1 ? &*s1 : nullptr, routing, config.cost,
                KernelSplit::with_comm_blocks(config.n, points.front()));

  std::vector<CurvePoint> curve(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      const auto split = KernelSplit::with_comm_blocks(config.n, points[i]);
      const auto r = simulate_fine(build_problem(s0 ? &*s0 : nullptr,
                                                 s1 ? &*s1 : nullptr, routing,
                                                 config.cost, split, false));
      curve[i] = {points[i], r.total_latency_ns};
    }
  };
  const auto jobs = static_cast<std::size_t>(
      std::clamp<std::int64_t>(config.jobs, 1, static_cast<std::int64_t>(points.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  SplitRecord rec;
  rec.key = config.key();
  rec.curve = std::move(curve);
  rec.optimal_n_c = rec.curve.front().n_c;
  rec.latency_ns = rec.curve.front().latency_ns;
  for (const auto& p : rec.curve) {
    if (p.latency_ns < rec.latency_ns) {
      rec.optimal_n_c = p.n_c;
      rec.latency_ns = p.latency_ns;
    }
  }
  return rec;
}

const SplitRecord& select_record(const SplitMetadata& metadata,
                                 const SplitKey& query) {
  const SplitRecord* best = nullptr;
  for (const auto& r : metadata.records) {
    if (r.key == query) return r;
    if (!r.key.compatible(query)) continue;
    if (!best) {
      best = &r;
      continue;
    }
    const auto d = std::llabs(r.key.m_bucket - query.m_bucket);
    const auto bd = std::llabs(best->key.m_bucket - query.m_bucket);
    if (d < bd || (d == bd && r.key.m_bucket < best->key.m_bucket)) best = &r;
  }
  if (!best) {
    throw UnprofiledConfigError("unprofiled configuration: no split metadata for " +
                                query.to_json().dump());
  }
  return *best;
}

KernelSplit select_split(const SplitMetadata& metadata, const SplitKey& query) {
  return select_record(metadata, query).split();
}

std::string curve_csv(const SplitRecord& record) {
  std::ostringstream os;
  os << "n_c,latency_ns\n";
  for (const auto& p : record.curve) os << p.n_c << ',' << p.latency_ns << '\n';
  return os.str();
}

}  // namespace moesim
