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

#include "moesim/experiment.h"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "moesim/dependency_resolver.h"
#include "moesim/errors.h"
#include "moesim/random.h"
#include "moesim/reference_executor.h"
#include "moesim/schedule_mutation.h"

namespace moesim {

ModeSpec ModeSpec::parse(std::string_view s) {
  if (s == "fine") return {Kind::kFine, 1};
  if (s == "sequential") return {Kind::kSequential, 1};
  constexpr std::string_view prefix = "coarse:";
  if (s.substr(0, prefix.size()) == prefix) {
    const std::string digits(s.substr(prefix.size()));
    std::size_t used = 0;
    long long c = 0;
    try {
      c = std::stoll(digits, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (!digits.empty() && used == digits.size() && c >= 1) return {Kind::kCoarse, c};
  }
  throw ConfigError("bad mode '" + std::string(s) +
                    "' (expected fine, coarse:<chunks> or sequential)");
}

std::vector<ModeSpec> ModeSpec::parse_list(std::string_view s) {
  std::vector<ModeSpec> out;
  std::size_t begin = 0;
  while (begin <= s.size()) {
    const auto end = std::min(s.find(',', begin), s.size());
    out.push_back(parse(s.substr(begin, end - begin)));
    begin = end + 1;
  }
  return out;
}

std::string ModeSpec::to_string() const {
  switch (kind) {
    case Kind::kFine:
      return "fine";
    case Kind::kCoarse:
      return "coarse:" + std::to_string(chunks);
    case Kind::kSequential:
      break;
  }
  return "sequential";
}

ExperimentConfig ExperimentConfig::defaults(Command command) {
  ExperimentConfig c;
  c.model = moesim::model_preset(c.model_preset);
  c.cost = cost_preset("h800");
  switch (command) {
    case Command::kSweep:
      c.phase = SweepPhase::kLayer1;
      break;
    case Command::kCompare:
      c.modes = ModeSpec::parse_list("fine,coarse:2,coarse:4,sequential");
      break;
    case Command::kVerify:
      c.model_preset.clear();
      c.model = ModelConfig{1, 8, 2, 16, 32, 2};
      c.parallel = ParallelSpec{1, 4};
      c.workload = WorkloadSpec{64, 0, 0.0};
      c.tile_rows = 4;
      break;
    case Command::kRoute:
    case Command::kRun:
      break;
  }
  return c;
}

void ExperimentConfig::set_model_preset(const std::string& name) {
  model = moesim::model_preset(name);
  model_preset = name;
}

void ExperimentConfig::set_cost_preset(const std::string& name) { cost = cost_preset(name); }

void ExperimentConfig::apply_json(const Json& j) {
  try {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.is_string()) {
        set_model_preset(m.get<std::string>());
      } else {
        if (m.contains("preset")) {
          throw ConfigError("model: give either a preset name or inline fields");
        }
        model = model_from_json(m);
        model_preset.clear();
      }
    }
    if (j.contains("parallel")) {
      const auto& p = j.at("parallel");
      parallel.tp = p.value("tp", parallel.tp);
      parallel.ep = p.value("ep", parallel.ep);
    }
    if (j.contains("workload")) {
      const auto& w = j.at("workload");
      workload.M = w.value("M", workload.M);
      workload.seed = w.value("seed", workload.seed);
      workload.target_std = w.value("std", workload.target_std);
    }
    if (j.contains("cost")) {
      const auto& c = j.at("cost");
      if (c.is_string()) {
        set_cost_preset(c.get<std::string>());
      } else {
        if (c.contains("preset")) {
          throw ConfigError("cost: give either a preset name or inline fields");
        }
        cost = CostModel::from_json(c);
      }
    }
    if (j.contains("sim")) {
      const auto& s = j.at("sim");
      n = s.value("n", n);
      n_c = s.value("n_c", n_c);
      tile_rows = s.value("tile_rows", tile_rows);
      tile_cols = s.value("tile_cols", tile_cols);
      hidden_tile_cols = s.value("hidden_tile_cols", hidden_tile_cols);
      rank = s.value("rank", rank);
      stride = s.value("stride", stride);
      jobs = s.value("jobs", jobs);
      auto_split = s.value("auto_split", auto_split);
      if (s.contains("mode")) modes = ModeSpec::parse_list(s.at("mode").get<std::string>());
      if (s.contains("phase")) phase = parse_sweep_phase(s.at("phase").get<std::string>());
    }
    if (j.contains("routing")) routing_path = j.at("routing").get<std::string>();
    if (j.contains("output")) {
      const auto& o = j.at("output");
      out_dir = o.value("dir", out_dir);
      metadata_path = o.value("metadata", metadata_path);
    }
    if (j.contains("verify")) {
      verify_instances = j.at("verify").value("instances", verify_instances);
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void ExperimentConfig::validate() const {
  model.validate();
  parallel.validate_for(model);
  workload.validate();
  cost.validate();
  KernelSplit::with_comm_blocks(n, n_c).validate();
  if (tile_rows < 1) throw ConfigError("tile_rows must be >= 1");
  if (tile_cols < 0 || tile_cols > model.N) throw ConfigError("tile_cols must be in [0, N]");
  if (hidden_tile_cols < 0) throw ConfigError("hidden_tile_cols must be >= 0");
  if (modes.empty()) throw ConfigError("at least one mode is required");
  if (rank < 0 || rank >= parallel.world()) throw ConfigError("rank is outside the world");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (verify_instances < 1) throw ConfigError("verify instances must be >= 1");
}

std::int64_t ExperimentConfig::effective_tile_cols() const {
  return tile_cols > 0 ? tile_cols : default_tile_cols(model.N);
}

std::int64_t ExperimentConfig::effective_hidden_tile_cols() const {
  return hidden_tile_cols > 0 ? hidden_tile_cols : default_tile_cols(model.K / parallel.tp);
}

std::string ExperimentConfig::effective_metadata_path() const {
  if (!metadata_path.empty()) return metadata_path;
  return (std::filesystem::path(out_dir) / "metadata.json").string();
}

SharedTensorMeta ExperimentConfig::layer0_meta() const {
  return SharedTensorMeta::layer0(model, parallel, workload.M, tile_rows,
                                  effective_hidden_tile_cols());
}

SharedTensorMeta ExperimentConfig::layer1_meta() const {
  return SharedTensorMeta::layer1(model, parallel, workload.M, effective_tile_cols(),
                                  tile_rows);
}

SweepConfig ExperimentConfig::sweep_config() const {
  SweepConfig s;
  s.model = model;
  s.parallel = parallel;
  s.workload = workload;
  s.cost = cost;
  s.n = n;
  s.tile_rows = tile_rows;
  s.tile_cols = effective_tile_cols();
  s.hidden_tile_cols = effective_hidden_tile_cols();
  s.phase = phase;
  s.rank = rank;
  s.stride = stride;
  s.jobs = jobs;
  return s;
}

Json ExperimentConfig::to_json() const {
  Json mode_list = Json::array();
  for (const auto& m : modes) mode_list.push_back(m.to_string());
  Json j;
  j["model"] = model_preset.empty() ? moesim::to_json(model) : Json(model_preset);
  j["model_shape"] = moesim::to_json(model);
  j["parallel"] = moesim::to_json(parallel);
  j["workload"] = moesim::to_json(workload);
  j["cost"] = cost.to_json();
  j["sim"] = Json{{"n", n},
                  {"n_c", n_c},
                  {"tile_rows", tile_rows},
                  {"tile_cols", effective_tile_cols()},
                  {"hidden_tile_cols", effective_hidden_tile_cols()},
                  {"mode", mode_list},
                  {"rank", rank},
                  {"phase", moesim::to_string(phase)},
                  {"auto_split", auto_split}};
  if (!routing_path.empty()) j["routing"] = routing_path;
  return j;
}

RoutingTable experiment_routing(const ExperimentConfig& config) {
  if (config.routing_path.empty()) {
    return build_routing(config.model, config.parallel, config.workload);
  }
  std::ifstream in(config.routing_path);
  if (!in) throw ConfigError("cannot read routing '" + config.routing_path + "'");
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError("cannot parse routing '" + config.routing_path + "': " + e.what());
  }
  RoutingTable rt;
  try {
    rt = RoutingTable::from_json(j);
  } catch (const Json::exception& e) {
    throw ConfigError("malformed routing '" + config.routing_path + "': " + e.what());
  }
  if (rt.num_experts() != config.model.E || rt.topk() != config.model.topk ||
      !(rt.parallel() == config.parallel) || rt.num_tokens() != config.workload.M) {
    throw ConfigError("routing '" + config.routing_path +
                      "' does not match the configured E, topk, parallel or M");
  }
  return rt;
}

SimResult run_mode(const ExperimentConfig& config, const RoutingTable& routing,
                   const ModeSpec& mode, const KernelSplit& split) {
  const bool with0 = config.phase != SweepPhase::kLayer1;
  const bool with1 = config.phase != SweepPhase::kLayer0;
  if (mode.kind == ModeSpec::Kind::kFine) {
    std::optional<TileSchedule> s0;
    std::optional<TileSchedule> s1;
    if (with0) s0 = resolve_layer0(routing, config.rank, config.layer0_meta());
    if (with1) s1 = resolve_layer1(routing, config.rank, config.layer1_meta());
    return simulate_fine(s0 ? &*s0 : nullptr, s1 ? &*s1 : nullptr, routing, config.cost,
                         split);
  }
  if (!with0) throw ConfigError("coarse and sequential modes need the layer0 kernel");
  LayerMetas metas{config.layer0_meta(), std::nullopt};
  if (with1) metas.layer1 = config.layer1_meta();
  if (mode.kind == ModeSpec::Kind::kSequential) {
    return simulate_sequential(routing, config.rank, metas, config.cost, split);
  }
  return simulate_coarse(routing, config.rank, metas, config.cost, split, mode.chunks);
}

KernelSplit experiment_split(const ExperimentConfig& config) {
  if (!config.auto_split) return KernelSplit::with_comm_blocks(config.n, config.n_c);
  const auto metadata = SplitMetadata::load(config.effective_metadata_path());
  return select_split(metadata, config.sweep_config().key());
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
}

std::filesystem::path output_dir(const ExperimentConfig& c) {
  std::filesystem::path dir(c.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + c.out_dir + "'");
  return dir;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int cmd_route(const ExperimentConfig& c, std::ostream& out) {
  const auto rt = experiment_routing(c);
  const auto dir = output_dir(c);
  write_file(dir / "routing.json", rt.to_json().dump(2) + "\n");
  out << "achieved std " << fixed(rt.fraction_std(), 6) << " (target "
      << fixed(c.workload.target_std, 6) << ")\n";
  out << "expert counts:";
  for (auto n : rt.expert_counts()) out << ' ' << n;
  out << "\nwrote " << (dir / "routing.json").string() << "\n";
  return 0;
}

void dump_schedules(const ExperimentConfig& c, const RoutingTable& rt,
                    const std::filesystem::path& dir) {
  if (c.phase != SweepPhase::kLayer1) {
    write_file(dir / "schedule_layer0.json",
               resolve_layer0(rt, c.rank, c.layer0_meta()).to_json().dump(2) + "\n");
  }
  if (c.phase != SweepPhase::kLayer0) {
    write_file(dir / "schedule_layer1.json",
               resolve_layer1(rt, c.rank, c.layer1_meta()).to_json().dump(2) + "\n");
  }
}

void print_summary(std::ostream& out, const SimResult& r) {
  out << r.mode << ": n_c=" << r.split.n_c << " latency " << fixed(r.total_latency_us(), 3)
      << " us, comm busy " << r.comm_busy_ns << " ns, compute busy " << r.compute_busy_ns
      << " ns, exposed comm " << r.exposed_comm_ns << " ns, hidden "
      << fixed(r.hidden_fraction, 4) << "\n";
}

int cmd_run(const ExperimentConfig& c, std::ostream& out) {
  const auto rt = experiment_routing(c);
  const auto split = experiment_split(c);
  const auto r = run_mode(c, rt, c.modes.front(), split);
  const auto dir = output_dir(c);
  Json j{{"config", c.to_json()}, {"result", r.to_json()}};
  j["config"]["sim"]["n_c"] = split.n_c;
  write_file(dir / "result.json", j.dump(2) + "\n");
  write_file(dir / "timeline.csv", r.timeline_csv());
  if (c.dump_schedule) dump_schedules(c, rt, dir);
  print_summary(out, r);
  return 0;
}

int cmd_sweep(const ExperimentConfig& c, std::ostream& out) {
  const auto rec = sweep_split(c.sweep_config());
  const auto dir = output_dir(c);
  const auto path = c.effective_metadata_path();
  SplitMetadata meta;
  if (std::filesystem::exists(path)) meta = SplitMetadata::load(path);
  meta.upsert(rec);
  meta.save(path);
  write_file(dir / "curve.csv", curve_csv(rec));
  out << "optimal n_c=" << rec.optimal_n_c << " latency " << rec.latency_ns << " ns over "
      << rec.curve.size() << " splits\nwrote " << path << " and "
      << (dir / "curve.csv").string() << "\n";
  return 0;
}

int cmd_compare(const ExperimentConfig& c, std::ostream& out) {
  const auto rt = experiment_routing(c);
  const auto split = experiment_split(c);
  std::ostringstream csv;
  csv << "mode,total_latency_ns,comm_busy_ns,compute_busy_ns,exposed_comm_ns,"
         "hidden_fraction\n";
  for (const auto& m : c.modes) {
    const auto r = run_mode(c, rt, m, split);
    csv << m.to_string() << ',' << r.total_latency_ns << ',' << r.comm_busy_ns << ','
        << r.compute_busy_ns << ',' << r.exposed_comm_ns << ','
        << fixed(r.hidden_fraction, 6) << '\n';
    print_summary(out, r);
  }
  const auto dir = output_dir(c);
  write_file(dir / "compare.csv", csv.str());
  out << "wrote " << (dir / "compare.csv").string() << "\n";
  return 0;
}

struct VerifyReport {
  std::vector<std::string> failures;
  std::ostringstream log;
};

void verify_instance(const ExperimentConfig& c, std::int64_t index, VerifyReport& rep) {
  WorkloadSpec wl = c.workload;
  wl.seed = c.workload.seed + static_cast<std::uint64_t>(index);
  ExperimentConfig ci = c;
  ci.workload = wl;
  const auto rt = experiment_routing(ci);
  auto schedules = resolve_all(rt, ci.layer0_meta(), ci.layer1_meta());
  const std::string tag = "instance " + std::to_string(index) + ": ";

  if (c.fuzz_seed) {
    SplitMix64 rng(*c.fuzz_seed + static_cast<std::uint64_t>(index));
    std::vector<std::pair<std::int64_t, int>> targets;  // (rank, layer)
    for (std::int64_t r = 0; r < rt.world(); ++r) {
      if (!schedules.layer0[r].tiles.empty()) targets.emplace_back(r, 0);
      if (!schedules.layer1[r].tiles.empty()) targets.emplace_back(r, 1);
    }
    if (!targets.empty()) {
      const auto [r, layer] = targets[rng.below(targets.size())];
      auto& s = layer == 0 ? schedules.layer0[r] : schedules.layer1[r];
      const auto kinds = applicable_mutations(s);
      const auto m = mutate_schedule(s, kinds[rng.below(kinds.size())], rng);
      rep.log << tag << "injected " << to_string(m->kind) << " into rank " << r
              << " layer" << layer << ": " << m->description << "\n";
    }
  }

  bool clean = true;
  for (std::int64_t r = 0; r < rt.world(); ++r) {
    for (int layer = 0; layer < 2; ++layer) {
      const auto& s = layer == 0 ? schedules.layer0[r] : schedules.layer1[r];
      for (const auto& v : validate_schedule(s, rt, r)) {
        clean = false;
        rep.failures.push_back(tag + "rank " + std::to_string(r) + " layer" +
                               std::to_string(layer) + " " + to_string(v.kind) +
                               " at tile " + std::to_string(v.tile_id) + ": " + v.reason);
      }
    }
  }
  if (!clean) return;

  const auto input = DenseMatrix::random(rt.num_tokens(), c.model.N, wl.seed * 2 + 1);
  const auto weights = ExpertWeights::random(c.model, wl.seed * 2 + 2);
  const auto naive = execute_naive(input, weights, rt);
  if (c.parallel.tp == 1) {
    const auto scheduled = execute_scheduled(input, weights, rt, schedules);
    const auto d = first_difference(naive, scheduled);
    if (!d.equal) {
      std::ostringstream os;
      os << std::setprecision(17) << tag << "scheduled output differs at element ("
         << d.row << ", " << d.col << "): " << d.lhs << " vs " << d.rhs;
      rep.failures.push_back(os.str());
      return;
    }
    rep.log << tag << "pass, M=" << rt.num_tokens() << ", bitwise equal\n";
  } else {
    const auto sharded = execute_tp_sharded(input, weights, rt, c.parallel.tp);
    const double rel = max_relative_error(naive, sharded);
    if (rel > 1e-6) {
      const auto d = first_difference(naive, sharded);
      std::ostringstream os;
      os << std::setprecision(17) << tag << "sharded output differs at element ("
         << d.row << ", " << d.col << "): relative error " << rel;
      rep.failures.push_back(os.str());
      return;
    }
    rep.log << tag << "pass, M=" << rt.num_tokens() << ", max relative error " << rel
            << "\n";
  }
}

int cmd_verify(const ExperimentConfig& c, std::ostream& out) {
  VerifyReport rep;
  const std::int64_t instances = c.routing_path.empty() ? c.verify_instances : 1;
  for (std::int64_t i = 0; i < instances; ++i) verify_instance(c, i, rep);
  std::ostringstream text;
  text << rep.log.str();
  for (const auto& f : rep.failures) text << "FAIL " << f << "\n";
  text << (rep.failures.empty() ? "PASS" : "FAIL") << ": " << instances
       << " instance(s), " << rep.failures.size() << " violation(s)\n";
  const auto dir = output_dir(c);
  write_file(dir / "verify.txt", text.str());
  out << text.str();
  return rep.failures.empty() ? 0 : 1;
}

// Flags shared by every subcommand; unset values leave the config alone.
struct Flags {
  std::string config;
  std::optional<std::string> preset, cost_preset, mode, phase, routing, out_dir, metadata;
  std::optional<std::int64_t> M, tp, ep, n, n_c, tile_rows, tile_cols, hidden_tile_cols,
      rank, stride, jobs, instances;
  std::optional<std::uint64_t> seed, fuzz;
  std::optional<double> target_std;
  bool auto_split = false;
  bool dump_schedule = false;
};

void add_flags(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON experiment config");
  app->add_option("--preset", f.preset, "model preset");
  app->add_option("--M", f.M, "tokens per forward pass");
  app->add_option("--seed", f.seed, "routing seed");
  app->add_option("--std", f.target_std, "target std of expert load fractions");
  app->add_option("--tp", f.tp, "tensor-parallel size");
  app->add_option("--ep", f.ep, "expert-parallel size");
  app->add_option("--cost-preset", f.cost_preset, "cost preset (h800, l20)");
  app->add_option("--mode", f.mode, "fine, coarse:<c>, sequential; comma list for compare");
  app->add_option("--phase", f.phase, "layer0, layer1 or both");
  app->add_option("--n", f.n, "thread blocks in the fused kernel");
  app->add_option("--n-c", f.n_c, "communication blocks");
  app->add_option("--tile-rows", f.tile_rows, "T_M");
  app->add_option("--tile-cols", f.tile_cols, "T_N");
  app->add_option("--hidden-tile-cols", f.hidden_tile_cols, "layer0 tile width");
  app->add_option("--rank", f.rank, "simulated rank");
  app->add_option("--routing", f.routing, "routing.json to use instead of generating");
  app->add_option("--out-dir,--out", f.out_dir, "output directory");
  app->add_option("--metadata", f.metadata, "split metadata file");
  app->add_option("--stride", f.stride, "n_c stride of a sweep");
  app->add_option("--jobs", f.jobs, "parallel sweep workers");
  app->add_option("--instances", f.instances, "verify instances");
  app->add_option("--fuzz", f.fuzz, "inject one schedule mutation per instance");
  app->add_flag("--auto-split", f.auto_split, "pick n_c from split metadata");
  app->add_flag("--dump-schedule", f.dump_schedule, "write the resolved schedules");
}

ExperimentConfig make_config(Command cmd, const Flags& f) {
  auto c = ExperimentConfig::defaults(cmd);
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot read config '" + f.config + "'");
    Json j;
    try {
      in >> j;
    } catch (const Json::exception& e) {
      throw ConfigError("cannot parse config '" + f.config + "': " + e.what());
    }
    c.apply_json(j);
  }
  if (f.preset) c.set_model_preset(*f.preset);
  if (f.M) c.workload.M = *f.M;
  if (f.seed) c.workload.seed = *f.seed;
  if (f.target_std) c.workload.target_std = *f.target_std;
  if (f.tp) c.parallel.tp = *f.tp;
  if (f.ep) c.parallel.ep = *f.ep;
  if (f.cost_preset) c.set_cost_preset(*f.cost_preset);
  if (f.mode) c.modes = ModeSpec::parse_list(*f.mode);
  if (f.phase) c.phase = parse_sweep_phase(*f.phase);
  if (f.n) c.n = *f.n;
  if (f.n_c) c.n_c = *f.n_c;
  if (f.n && !f.n_c && c.n_c >= c.n) c.n_c = std::max<std::int64_t>(1, c.n / 8);
  if (f.tile_rows) c.tile_rows = *f.tile_rows;
  if (f.tile_cols) c.tile_cols = *f.tile_cols;
  if (f.hidden_tile_cols) c.hidden_tile_cols = *f.hidden_tile_cols;
  if (f.rank) c.rank = *f.rank;
  if (f.routing) c.routing_path = *f.routing;
  if (f.out_dir) c.out_dir = *f.out_dir;
  if (f.metadata) c.metadata_path = *f.metadata;
  if (f.stride) c.stride = *f.stride;
  if (f.jobs) c.jobs = *f.jobs;
  if (f.instances) c.verify_instances = *f.instances;
  if (f.fuzz) c.fuzz_seed = *f.fuzz;
  if (f.auto_split) c.auto_split = true;
  if (f.dump_schedule) c.dump_schedule = true;
  c.validate();
  return c;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"MoE fused-kernel overlap simulator"};
  app.require_subcommand(1);
  Flags flags;
  struct Sub {
    const char* name;
    const char* help;
    Command cmd;
  };
  const Sub subs[] = {
      {"route", "generate a routing table", Command::kRoute},
      {"run", "simulate one mode", Command::kRun},
      {"sweep", "sweep the comm block count", Command::kSweep},
      {"verify", "check scheduled execution against the reference", Command::kVerify},
      {"compare", "simulate several modes into one CSV", Command::kCompare},
  };
  std::vector<std::pair<CLI::App*, Command>> apps;
  for (const auto& s : subs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_flags(sub, flags);
    apps.emplace_back(sub, s.cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    for (const auto& [sub, cmd] : apps) {
      if (sub->parsed()) {
        err << "error: " << e.what() << "\n" << sub->help();
        return 2;
      }
    }
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    for (const auto& [sub, cmd] : apps) {
      if (!sub->parsed()) continue;
      const auto config = make_config(cmd, flags);
      switch (cmd) {
        case Command::kRoute:
          return cmd_route(config, out);
        case Command::kRun:
          return cmd_run(config, out);
        case Command::kSweep:
          return cmd_sweep(config, out);
        case Command::kVerify:
          return cmd_verify(config, out);
        case Command::kCompare:
          return cmd_compare(config, out);
      }
    }
    err << "error: no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace moesim
