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

#include "moesim/overlap_simulator.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

#include "moesim/errors.h"

namespace moesim {

void KernelSplit::validate() const {
  if (n_p < 1) throw ConfigError("split: n_p must be >= 1");
  if (n_c < 1) throw ConfigError("split: n_c must be >= 1");
  if (n_p + n_c != n) throw ConfigError("split: n_p + n_c must equal n");
}

std::int64_t round_half_up(double ns) {
  return static_cast<std::int64_t>(std::floor(ns + 0.5));
}

void CostModel::validate() const {
  auto nonneg = [](double v) { return v >= 0.0 && !std::isnan(v); };
  auto positive = [](double v) { return v > 0.0; };
  if (!nonneg(alpha_tile_ns) || !nonneg(alpha_msg_ns) || !nonneg(chunk_overhead_ns)) {
    throw ConfigError("cost: latencies must be >= 0");
  }
  if (!positive(compute_rate) || !positive(local_bandwidth) ||
      !positive(intra_bandwidth) || !nonneg(weight_bandwidth)) {
    throw ConfigError("cost: rates and bandwidths must be > 0");
  }
  if (!nonneg(local_aggregate_bandwidth) || !nonneg(intra_aggregate_bandwidth)) {
    throw ConfigError("cost: aggregate bandwidth caps must be >= 0");
  }
  if (local_bandwidth < intra_bandwidth) {
    throw ConfigError("cost: local bandwidth must be >= intra-node bandwidth");
  }
  if (message_tokens < 0) throw ConfigError("cost: message_tokens must be >= 0");
}

std::int64_t CostModel::tile_ns(std::int64_t rows, std::int64_t cols,
                                std::int64_t inner,
                                std::int64_t tile_rows,
                                std::int64_t weight_bytes) const {
  const std::int64_t effective = pad_ragged_tiles ? std::max(rows, tile_rows) : rows;
  const double flops = 2.0 * static_cast<double>(effective) *
                       static_cast<double>(cols) * static_cast<double>(inner);
  double ns = alpha_tile_ns + flops / compute_rate;
  if (weight_bytes > 0 && weight_bandwidth > 0.0) {
    ns += static_cast<double>(weight_bytes) / weight_bandwidth;
  }
  return round_half_up(ns);
}

std::int64_t CostModel::message_ns(std::int64_t bytes, bool local,
                                   std::int64_t n_c) const {
  double bw = local ? local_bandwidth : intra_bandwidth;
  const double cap = local ? local_aggregate_bandwidth : intra_aggregate_bandwidth;
  if (cap > 0.0) bw = std::min(bw, cap / static_cast<double>(n_c));
  return round_half_up(alpha_msg_ns + static_cast<double>(bytes) / bw);
}

CostModel CostModel::without_communication() const {
  CostModel c = *this;
  c.name = name + "-nocomm";
  c.alpha_msg_ns = 0.0;
  c.local_bandwidth = std::numeric_limits<double>::infinity();
  c.intra_bandwidth = std::numeric_limits<double>::infinity();
  c.local_aggregate_bandwidth = 0.0;
  c.intra_aggregate_bandwidth = 0.0;
  return c;
}

namespace {

Json finite_or_null(double v) { return std::isinf(v) ? Json(nullptr) : Json(v); }

double read_rate(const Json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (j.at(key).is_null()) return std::numeric_limits<double>::infinity();
  return j.at(key).get<double>();
}

}  // namespace

Json CostModel::to_json() const {
  return Json{{"name", name},
              {"alpha_tile_ns", alpha_tile_ns},
              {"compute_rate", finite_or_null(compute_rate)},
              {"alpha_msg_ns", alpha_msg_ns},
              {"local_bandwidth", finite_or_null(local_bandwidth)},
              {"intra_bandwidth", finite_or_null(intra_bandwidth)},
              {"local_aggregate_bandwidth", local_aggregate_bandwidth},
              {"intra_aggregate_bandwidth", intra_aggregate_bandwidth},
              {"weight_bandwidth", weight_bandwidth},
              {"chunk_overhead_ns", chunk_overhead_ns},
              {"pad_ragged_tiles", pad_ragged_tiles},
              {"message_tokens", message_tokens}};
}

CostModel CostModel::from_json(const Json& j) {
  CostModel c;
  c.name = j.value("name", c.name);
  c.alpha_tile_ns = j.value("alpha_tile_ns", c.alpha_tile_ns);
  c.compute_rate = read_rate(j, "compute_rate", c.compute_rate);
  c.alpha_msg_ns = j.value("alpha_msg_ns", c.alpha_msg_ns);
  c.local_bandwidth = read_rate(j, "local_bandwidth", c.local_bandwidth);
  c.intra_bandwidth = read_rate(j, "intra_bandwidth", c.intra_bandwidth);
  c.local_aggregate_bandwidth =
      j.value("local_aggregate_bandwidth", c.local_aggregate_bandwidth);
  c.intra_aggregate_bandwidth =
      j.value("intra_aggregate_bandwidth", c.intra_aggregate_bandwidth);
  c.weight_bandwidth = j.value("weight_bandwidth", c.weight_bandwidth);
  c.chunk_overhead_ns = j.value("chunk_overhead_ns", c.chunk_overhead_ns);
  c.pad_ragged_tiles = j.value("pad_ragged_tiles", c.pad_ragged_tiles);
  c.message_tokens = j.value("message_tokens", c.message_tokens);
  c.validate();
  return c;
}

CostModel cost_preset(std::string_view name) {
  CostModel c;
  if (name == "h800") {
    c.name = "h800";
    c.alpha_tile_ns = 300.0;
    c.compute_rate = 5000.0;
    c.alpha_msg_ns = 150.0;
    c.local_bandwidth = 5.7;
    c.intra_bandwidth = 1.2;
    c.local_aggregate_bandwidth = 2000.0;
    c.intra_aggregate_bandwidth = 160.0;
    c.weight_bandwidth = 8.6;
    c.chunk_overhead_ns = 15000.0;
    c.pad_ragged_tiles = true;
    c.message_tokens = 128;
    return c;
  }
  if (name == "l20") {
    c.name = "l20";
    c.alpha_tile_ns = 400.0;
    c.compute_rate = 900.0;
    c.alpha_msg_ns = 400.0;
    c.local_bandwidth = 3.0;
    c.intra_bandwidth = 0.5;
    c.local_aggregate_bandwidth = 700.0;
    c.intra_aggregate_bandwidth = 25.0;
    c.weight_bandwidth = 4.0;
    c.chunk_overhead_ns = 20000.0;
    c.pad_ragged_tiles = true;
    c.message_tokens = 128;
    return c;
  }
  throw ConfigError("unknown cost preset '" + std::string(name) + "'");
}

std::vector<std::string> cost_preset_names() { return {"h800", "l20"}; }

std::int64_t result_destination(const ParallelSpec& par, std::int64_t source,
                                std::int64_t rank) {
  return par.group_of_rank(source) * par.tp + par.tp_index(rank);
}

namespace {

void require_valid(const TileSchedule& s, const RoutingTable& routing) {
  const auto v = validate_schedule(s, routing, s.rank);
  if (v.empty()) return;
  throw InvalidScheduleError(to_string(v.front().kind) + " (tile " +
                             std::to_string(v.front().tile_id) +
                             "): " + v.front().reason);
}

std::int64_t tile_duration(const Tile& t, const SharedTensorMeta& meta,
                           const CostModel& cost) {
  const std::int64_t inner =
      meta.dim == DecomposedDim::kM ? meta.cols : meta.hidden_cols;
  const std::int64_t weights = t.row_begin == 0 ? inner * t.width() * meta.dtype_bytes : 0;
  return cost.tile_ns(t.rows(), t.width(), inner, meta.tile_rows, weights);
}

// Distinct tokens served by `rank` across `tiles`, ascending id, with sources.
std::map<std::int64_t, std::int64_t> served_tokens(const std::vector<Tile>& tiles) {
  std::map<std::int64_t, std::int64_t> out;
  for (const auto& t : tiles) {
    if (t.col_block != 0) continue;  // every row appears in column block 0
    for (const auto& ref : t.tokens) out.emplace(ref.token, ref.source_rank);
  }
  return out;
}

// Token count per layer1 result destination, ascending destination.
std::map<std::int64_t, std::int64_t> tokens_per_destination(
    const std::map<std::int64_t, std::int64_t>& tokens, const ParallelSpec& par,
    std::int64_t rank) {
  std::map<std::int64_t, std::int64_t> out;
  for (const auto& [tok, src] : tokens) ++out[result_destination(par, src, rank)];
  return out;
}

// Result messages of one column block: per destination, sliced to at most
// message_tokens tokens.
void append_result_messages(const std::map<std::int64_t, std::int64_t>& per_dest,
                            std::int64_t cols, std::int64_t rank,
                            std::int64_t dtype_bytes, const CostModel& cost,
                            std::int64_t n_c, std::int64_t chunk,
                            std::vector<SimMessage>& out) {
  for (const auto& [dest, total] : per_dest) {
    const std::int64_t slice = cost.message_tokens > 0 ? cost.message_tokens : total;
    for (std::int64_t b = 0; b < total; b += slice) {
      SimMessage m;
      m.chunk = chunk;
      m.dest = dest;
      m.tokens = std::min(slice, total - b);
      m.bytes = m.tokens * cols * dtype_bytes;
      m.duration = cost.message_ns(m.bytes, dest == rank, n_c);
      out.push_back(m);
    }
  }
}

}  // namespace

SimProblem build_problem(const TileSchedule* layer0, const TileSchedule* layer1,
                         const RoutingTable& routing, const CostModel& cost,
                         const KernelSplit& split, bool validate) {
  split.validate();
  cost.validate();
  SimProblem p;
  p.split = split;
  if (layer0 && layer1 && layer0->rank != layer1->rank) {
    throw ConfigError("layer0 and layer1 schedules are for different ranks");
  }
  p.rank = layer0 ? layer0->rank : (layer1 ? layer1->rank : 0);
  std::int64_t tile_base = 0;
  std::int64_t msg_base = 0;

  if (layer0) {
    if (layer0->layer != Layer::kLayer0) throw ConfigError("expected a layer0 schedule");
    if (validate) require_valid(*layer0, routing);
    SimPhase ph;
    ph.layer = Layer::kLayer0;
    const auto& meta = layer0->meta;
    std::map<std::int64_t, std::int64_t> message_of;  // token -> index
    for (const auto& t : layer0->tiles) {
      SimTile st;
      st.tile_id = t.tile_id;
      st.task_id = tile_base + t.tile_id;
      st.duration = tile_duration(t, meta, cost);
      for (const auto& ref : t.tokens) {
        if (ref.source_rank == p.rank) continue;
        auto [it, fresh] =
            message_of.emplace(ref.token, static_cast<std::int64_t>(ph.messages.size()));
        if (fresh) {
          SimMessage m;
          m.token = ref.token;
          m.dest = p.rank;
          m.tokens = 1;
          m.bytes = meta.cols * meta.dtype_bytes;
          m.duration = cost.message_ns(m.bytes, false, split.n_c);
          ph.messages.push_back(m);
        }
        st.deps.push_back(it->second);
      }
      ph.tiles.push_back(std::move(st));
    }
    for (std::size_t j = 0; j < ph.messages.size(); ++j) {
      ph.messages[j].task_id = msg_base + static_cast<std::int64_t>(j);
      ph.messages[j].block = static_cast<std::int64_t>(j) % split.n_c;
    }
    tile_base += static_cast<std::int64_t>(ph.tiles.size());
    msg_base += static_cast<std::int64_t>(ph.messages.size());
    p.phases.push_back(std::move(ph));
  }

  if (layer1) {
    if (layer1->layer != Layer::kLayer1) throw ConfigError("expected a layer1 schedule");
    if (validate) require_valid(*layer1, routing);
    SimPhase ph;
    ph.layer = Layer::kLayer1;
    const auto& meta = layer1->meta;
    std::map<std::int64_t, std::int64_t> index_of;  // tile id -> position
    for (std::size_t i = 0; i < layer1->tiles.size(); ++i) {
      const auto& t = layer1->tiles[i];
      SimTile st;
      st.tile_id = t.tile_id;
      st.task_id = tile_base + t.tile_id;
      st.duration = tile_duration(t, meta, cost);
      index_of[t.tile_id] = static_cast<std::int64_t>(i);
      ph.tiles.push_back(std::move(st));
    }
    const auto per_dest =
        tokens_per_destination(served_tokens(layer1->tiles), routing.parallel(), p.rank);
    for (std::size_t c = 0; c < layer1->reduce_chunks.size(); ++c) {
      const auto& rc = layer1->reduce_chunks[c];
      std::vector<std::int64_t> prereq;
      for (auto id : rc.prerequisites) prereq.push_back(index_of.at(id));
      ph.chunk_prereqs.push_back(std::move(prereq));
      append_result_messages(per_dest, rc.col_end - rc.col_begin, p.rank,
                             meta.dtype_bytes, cost, split.n_c,
                             static_cast<std::int64_t>(c), ph.messages);
    }
    for (std::size_t j = 0; j < ph.messages.size(); ++j) {
      ph.messages[j].task_id = msg_base + static_cast<std::int64_t>(j);
      ph.messages[j].block = static_cast<std::int64_t>(j) % split.n_c;
    }
    p.phases.push_back(std::move(ph));
  }
  return p;
}

namespace {

struct ListResult {
  std::vector<std::int64_t> start;
  std::vector<std::int64_t> block;
};

// Greedy list scheduling with release times: whenever compute blocks are
// idle, released tiles go out in list order to idle blocks in id order.
ListResult list_schedule(const std::vector<std::int64_t>& duration,
                         const std::vector<std::int64_t>& ready,
                         std::int64_t blocks, std::int64_t t_start) {
  const auto count = duration.size();
  ListResult r{std::vector<std::int64_t>(count, 0), std::vector<std::int64_t>(count, 0)};
  std::vector<std::size_t> by_ready(count);
  std::iota(by_ready.begin(), by_ready.end(), 0);
  std::stable_sort(by_ready.begin(), by_ready.end(),
                   [&](std::size_t a, std::size_t b) { return ready[a] < ready[b]; });
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> released;
  std::vector<std::int64_t> free_at(blocks, t_start);
  std::size_t next = 0;
  std::size_t remaining = count;
  while (remaining > 0) {
    std::int64_t t = *std::min_element(free_at.begin(), free_at.end());
    while (next < count && ready[by_ready[next]] <= t) released.push(by_ready[next++]);
    if (released.empty()) {
      t = ready[by_ready[next]];
      while (next < count && ready[by_ready[next]] <= t) released.push(by_ready[next++]);
    }
    for (std::int64_t b = 0; b < blocks && !released.empty(); ++b) {
      if (free_at[b] > t) continue;
      const auto i = released.top();
      released.pop();
      r.start[i] = t;
      r.block[i] = b;
      free_at[b] = t + duration[i];
      --remaining;
    }
  }
  return r;
}

using Span = std::pair<std::int64_t, std::int64_t>;

std::vector<Span> merge_spans(std::vector<Span> spans) {
  std::sort(spans.begin(), spans.end());
  std::vector<Span> out;
  for (const auto& s : spans) {
    if (s.second <= s.first) continue;
    if (!out.empty() && s.first <= out.back().second) {
      out.back().second = std::max(out.back().second, s.second);
    } else {
      out.push_back(s);
    }
  }
  return out;
}

std::int64_t measure(const std::vector<Span>& merged) {
  std::int64_t total = 0;
  for (const auto& s : merged) total += s.second - s.first;
  return total;
}

std::int64_t overlap(const std::vector<Span>& a, const std::vector<Span>& b) {
  std::int64_t total = 0;
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < a.size() && j < b.size()) {
    const auto lo = std::max(a[i].first, b[j].first);
    const auto hi = std::min(a[i].second, b[j].second);
    if (hi > lo) total += hi - lo;
    if (a[i].second < b[j].second) {
      ++i;
    } else {
      ++j;
    }
  }
  return total;
}

// Fills the aggregate metrics of a result from its intervals.
void finalize(SimResult& r) {
  std::vector<Span> comm;
  std::vector<Span> compute;
  r.bubble_ns.assign(r.split.n_p, 0);
  std::vector<std::vector<Span>> per_block(r.split.n_p);
  r.total_latency_ns = 0;
  r.comm_work_ns = 0;
  r.compute_work_ns = 0;
  for (const auto& iv : r.intervals) {
    r.total_latency_ns = std::max(r.total_latency_ns, iv.end_ns);
    if (iv.kind == BlockKind::kComm) {
      comm.emplace_back(iv.start_ns, iv.end_ns);
      r.comm_work_ns += iv.end_ns - iv.start_ns;
    } else {
      compute.emplace_back(iv.start_ns, iv.end_ns);
      r.compute_work_ns += iv.end_ns - iv.start_ns;
      per_block[iv.block_id].emplace_back(iv.start_ns, iv.end_ns);
    }
  }
  const auto comm_u = merge_spans(comm);
  const auto compute_u = merge_spans(compute);
  r.comm_busy_ns = measure(comm_u);
  r.compute_busy_ns = measure(compute_u);
  r.exposed_comm_ns = r.comm_busy_ns - overlap(comm_u, compute_u);
  r.hidden_fraction =
      r.comm_busy_ns > 0
          ? 1.0 - static_cast<double>(r.exposed_comm_ns) /
                      static_cast<double>(r.comm_busy_ns)
          : 0.0;
  for (std::int64_t b = 0; b < r.split.n_p; ++b) {
    auto& spans = per_block[b];
    std::sort(spans.begin(), spans.end());
    std::int64_t cursor = 0;
    for (const auto& s : spans) {
      r.bubble_ns[b] += std::max<std::int64_t>(0, s.first - cursor);
      cursor = std::max(cursor, s.second);
    }
  }
  std::sort(r.intervals.begin(), r.intervals.end(),
            [](const Interval& a, const Interval& b) {
              return std::tie(a.start_ns, a.block_id) < std::tie(b.start_ns, b.block_id);
            });
}

// Runs every comm block over its messages in (release, index) order.
void run_comm_blocks(const std::vector<SimMessage>& msgs,
                     const std::vector<std::int64_t>& release,
                     const KernelSplit& split, std::int64_t t_start,
                     std::vector<std::int64_t>& end, SimResult& r) {
  std::vector<std::vector<std::size_t>> queue(split.n_c);
  for (std::size_t j = 0; j < msgs.size(); ++j) queue[msgs[j].block].push_back(j);
  end.assign(msgs.size(), t_start);
  for (std::int64_t b = 0; b < split.n_c; ++b) {
    auto& q = queue[b];
    std::stable_sort(q.begin(), q.end(), [&](std::size_t x, std::size_t y) {
      return release[x] < release[y];
    });
    std::int64_t cursor = t_start;
    for (auto j : q) {
      const std::int64_t s = std::max(cursor, release[j]);
      end[j] = s + msgs[j].duration;
      cursor = end[j];
      r.intervals.push_back({split.n_p + b, BlockKind::kComm, msgs[j].task_id, s, end[j]});
    }
  }
}

}  // namespace

SimResult simulate_fine(const SimProblem& problem) {
  const auto& split = problem.split;
  split.validate();
  SimResult r;
  r.mode = "fine";
  r.split = split;
  std::int64_t t0 = 0;
  for (const auto& ph : problem.phases) {
    std::int64_t phase_end = t0;
    const auto count = ph.tiles.size();
    std::vector<std::int64_t> duration(count);
    for (std::size_t i = 0; i < count; ++i) duration[i] = ph.tiles[i].duration;
    std::vector<std::int64_t> msg_end;

    if (ph.layer == Layer::kLayer0) {
      const std::vector<std::int64_t> release(ph.messages.size(), t0);
      run_comm_blocks(ph.messages, release, split, t0, msg_end, r);
      std::vector<std::int64_t> ready(count, t0);
      for (std::size_t i = 0; i < count; ++i) {
        for (auto d : ph.tiles[i].deps) ready[i] = std::max(ready[i], msg_end[d]);
      }
      const auto ls = list_schedule(duration, ready, split.n_p, t0);
      for (std::size_t i = 0; i < count; ++i) {
        r.intervals.push_back({ls.block[i], BlockKind::kCompute, ph.tiles[i].task_id,
                               ls.start[i], ls.start[i] + duration[i]});
        phase_end = std::max(phase_end, ls.start[i] + duration[i]);
      }
    } else {
      const std::vector<std::int64_t> ready(count, t0);
      const auto ls = list_schedule(duration, ready, split.n_p, t0);
      for (std::size_t i = 0; i < count; ++i) {
        r.intervals.push_back({ls.block[i], BlockKind::kCompute, ph.tiles[i].task_id,
                               ls.start[i], ls.start[i] + duration[i]});
        phase_end = std::max(phase_end, ls.start[i] + duration[i]);
      }
      std::vector<std::int64_t> chunk_ready(ph.chunk_prereqs.size(), t0);
      for (std::size_t c = 0; c < ph.chunk_prereqs.size(); ++c) {
        for (auto i : ph.chunk_prereqs[c]) {
          chunk_ready[c] = std::max(chunk_ready[c], ls.start[i] + duration[i]);
        }
      }
      std::vector<std::int64_t> release(ph.messages.size());
      for (std::size_t j = 0; j < ph.messages.size(); ++j) {
        release[j] = chunk_ready[ph.messages[j].chunk];
      }
      run_comm_blocks(ph.messages, release, split, t0, msg_end, r);
    }
    for (auto e : msg_end) phase_end = std::max(phase_end, e);
    r.phase_end_ns.push_back(phase_end);
    t0 = phase_end;
  }
  finalize(r);
  return r;
}

SimResult simulate_fine(const TileSchedule* layer0, const TileSchedule* layer1,
                        const RoutingTable& routing, const CostModel& cost,
                        const KernelSplit& split) {
  return simulate_fine(build_problem(layer0, layer1, routing, cost, split));
}

namespace {

struct CoarseChunk {
  std::vector<std::int64_t> tiles0;  // durations
  std::vector<std::int64_t> tiles1;
  std::vector<SimMessage> recv;
  std::vector<SimMessage> send;
};

void append_tiles(const std::vector<ExpertBlock>& blocks,
                  const SharedTensorMeta& meta, const CostModel& cost,
                  std::vector<std::int64_t>& out) {
  const std::int64_t width = meta.output_tile_cols();
  const std::int64_t total = meta.output_cols();
  const std::int64_t inner =
      meta.dim == DecomposedDim::kM ? meta.cols : meta.hidden_cols;
  for (const auto& b : blocks) {
    const auto n = static_cast<std::int64_t>(b.tokens.size());
    for (std::int64_t r0 = 0; r0 < n; r0 += meta.tile_rows) {
      const std::int64_t rows = std::min(meta.tile_rows, n - r0);
      for (std::int64_t c = 0; c < total; c += width) {
        const std::int64_t w = std::min(width, total - c);
        const std::int64_t weights = r0 == 0 ? inner * w * meta.dtype_bytes : 0;
        out.push_back(cost.tile_ns(rows, w, inner, meta.tile_rows, weights));
      }
    }
  }
}

}  // namespace

SimResult simulate_coarse(const RoutingTable& routing, std::int64_t rank,
                          const LayerMetas& metas, const CostModel& cost,
                          const KernelSplit& split, std::int64_t chunks) {
  split.validate();
  cost.validate();
  if (chunks < 1) throw ConfigError("coarse: chunk count must be >= 1");
  if (metas.layer0.dim != DecomposedDim::kM ||
      (metas.layer1 && metas.layer1->dim != DecomposedDim::kN)) {
    throw ConfigError("coarse: layer metas have the wrong decomposition");
  }

  auto layout = sort_tokens_by_source(routing, rank);
  for (auto& b : layout) {
    std::sort(b.tokens.begin(), b.tokens.end());
  }
  std::map<std::int64_t, std::int64_t> served;  // token -> source
  for (const auto& b : layout) {
    for (const auto& ref : b.tokens) served.emplace(ref.token, ref.source_rank);
  }
  std::vector<std::int64_t> ids;
  for (const auto& [tok, src] : served) ids.push_back(tok);
  const auto distinct = static_cast<std::int64_t>(ids.size());
  const std::int64_t c_eff = std::max<std::int64_t>(1, std::min(chunks, distinct));

  std::map<std::int64_t, std::int64_t> chunk_of;
  for (std::int64_t k = 0; k < c_eff; ++k) {
    for (std::int64_t i = k * distinct / c_eff; i < (k + 1) * distinct / c_eff; ++i) {
      chunk_of[ids[i]] = k;
    }
  }

  std::vector<CoarseChunk> work(c_eff);
  for (std::int64_t k = 0; k < c_eff; ++k) {
    std::vector<ExpertBlock> part;
    std::map<std::int64_t, std::int64_t> toks;
    for (const auto& b : layout) {
      ExpertBlock eb{b.expert, {}};
      for (const auto& ref : b.tokens) {
        if (chunk_of.at(ref.token) == k) eb.tokens.push_back(ref);
      }
      part.push_back(std::move(eb));
    }
    for (const auto& [tok, src] : served) {
      if (chunk_of.at(tok) == k) toks.emplace(tok, src);
    }
    append_tiles(part, metas.layer0, cost, work[k].tiles0);
    for (const auto& [tok, src] : toks) {
      if (src == rank) continue;
      SimMessage m;
      m.token = tok;
      m.dest = rank;
      m.tokens = 1;
      m.bytes = metas.layer0.cols * metas.layer0.dtype_bytes;
      m.duration = cost.message_ns(m.bytes, false, split.n_c);
      work[k].recv.push_back(m);
    }
    if (metas.layer1) {
      const auto& m1 = *metas.layer1;
      append_tiles(part, m1, cost, work[k].tiles1);
      const auto per_dest = tokens_per_destination(toks, routing.parallel(), rank);
      for (std::int64_t cb = 0; cb < m1.num_col_blocks(); ++cb) {
        const std::int64_t cols = std::min(m1.tile_cols, m1.cols - cb * m1.tile_cols);
        append_result_messages(per_dest, cols, rank, m1.dtype_bytes, cost, split.n_c,
                               cb, work[k].send);
      }
    }
  }

  // Stable task ids: layer0 tiles, layer1 tiles, receives, sends.
  std::int64_t next_tile = 0;
  std::int64_t next_msg = 0;
  std::int64_t recv_index = 0;
  std::int64_t send_index = 0;
  std::vector<std::vector<std::int64_t>> tile0_ids(c_eff), tile1_ids(c_eff);
  for (std::int64_t k = 0; k < c_eff; ++k) {
    for (std::size_t i = 0; i < work[k].tiles0.size(); ++i) tile0_ids[k].push_back(next_tile++);
  }
  for (std::int64_t k = 0; k < c_eff; ++k) {
    for (std::size_t i = 0; i < work[k].tiles1.size(); ++i) tile1_ids[k].push_back(next_tile++);
  }
  for (auto& w : work) {
    for (auto& m : w.recv) {
      m.task_id = next_msg++;
      m.block = recv_index++ % split.n_c;
    }
  }
  for (auto& w : work) {
    for (auto& m : w.send) {
      m.task_id = next_msg++;
      m.block = send_index++ % split.n_c;
    }
  }

  SimResult r;
  r.mode = cost.chunk_overhead_ns == 0.0 && chunks == 1 ? "sequential"
                                                        : "coarse:" + std::to_string(chunks);
  r.split = split;

  // A comm stage occupies all comm blocks from its start until its last
  // message completes.
  auto comm_stage = [&](const std::vector<SimMessage>& msgs, std::int64_t start) {
    std::vector<std::int64_t> cursor(split.n_c, start);
    std::int64_t end = start;
    for (const auto& m : msgs) {
      const std::int64_t s = cursor[m.block];
      cursor[m.block] = s + m.duration;
      end = std::max(end, cursor[m.block]);
      r.intervals.push_back({split.n_p + m.block, BlockKind::kComm, m.task_id, s,
                             s + m.duration});
    }
    return end;
  };
  auto compute_kernel = [&](const std::vector<std::int64_t>& durations,
                            const std::vector<std::int64_t>& task_ids,
                            std::int64_t start) {
    const std::vector<std::int64_t> ready(durations.size(), start);
    const auto ls = list_schedule(durations, ready, split.n_p, start);
    std::int64_t end = start;
    for (std::size_t i = 0; i < durations.size(); ++i) {
      r.intervals.push_back({ls.block[i], BlockKind::kCompute, task_ids[i], ls.start[i],
                             ls.start[i] + durations[i]});
      end = std::max(end, ls.start[i] + durations[i]);
    }
    return end;
  };

  const std::int64_t overhead = round_half_up(cost.chunk_overhead_ns);
  std::int64_t comm_free = 0;
  std::vector<std::int64_t> recv_end(c_eff);
  for (std::int64_t k = 0; k < c_eff; ++k) {
    comm_free = comm_stage(work[k].recv, comm_free);
    recv_end[k] = comm_free;
  }
  std::int64_t compute_free = 0;
  std::vector<std::int64_t> compute_end(c_eff);
  for (std::int64_t k = 0; k < c_eff; ++k) {
    const std::int64_t start = std::max(recv_end[k], compute_free) + overhead;
    const std::int64_t mid = compute_kernel(work[k].tiles0, tile0_ids[k], start);
    compute_free = compute_kernel(work[k].tiles1, tile1_ids[k], mid);
    compute_end[k] = compute_free;
  }
  std::int64_t end = std::max(comm_free, compute_free);
  for (std::int64_t k = 0; k < c_eff; ++k) {
    comm_free = comm_stage(work[k].send, std::max(comm_free, compute_end[k]));
    end = std::max(end, comm_free);
  }
  r.phase_end_ns.push_back(end);
  finalize(r);
  r.total_latency_ns = std::max(r.total_latency_ns, end);
  return r;
}

SimResult simulate_sequential(const RoutingTable& routing, std::int64_t rank,
                              const LayerMetas& metas, const CostModel& cost,
                              const KernelSplit& split) {
  CostModel c = cost;
  c.chunk_overhead_ns = 0.0;
  auto r = simulate_coarse(routing, rank, metas, c, split, 1);
  r.mode = "sequential";
  return r;
}

std::int64_t latency_lower_bound(const SimProblem& problem) {
  const auto& split = problem.split;
  std::int64_t total = 0;
  for (const auto& ph : problem.phases) {
    std::int64_t work = 0;
    std::int64_t chain = 0;
    for (const auto& t : ph.tiles) {
      work += t.duration;
      chain = std::max(chain, t.duration);
    }
    std::vector<std::int64_t> queue(split.n_c, 0);
    // Layer0 comm blocks start together and never idle, so a message's
    // completion is the prefix of its block's queue.
    std::vector<std::int64_t> arrival(ph.messages.size(), 0);
    for (std::size_t j = 0; j < ph.messages.size(); ++j) {
      queue[ph.messages[j].block] += ph.messages[j].duration;
      arrival[j] = queue[ph.messages[j].block];
    }
    if (ph.layer == Layer::kLayer0) {
      for (const auto& t : ph.tiles) {
        std::int64_t ready = 0;
        for (auto d : t.deps) ready = std::max(ready, arrival[d]);
        chain = std::max(chain, ready + t.duration);
      }
    } else {
      std::vector<std::int64_t> longest_msg(ph.chunk_prereqs.size(), 0);
      for (const auto& m : ph.messages) {
        longest_msg[m.chunk] = std::max(longest_msg[m.chunk], m.duration);
      }
      for (std::size_t c = 0; c < ph.chunk_prereqs.size(); ++c) {
        std::int64_t longest_tile = 0;
        for (auto i : ph.chunk_prereqs[c]) {
          longest_tile = std::max(longest_tile, ph.tiles[i].duration);
        }
        chain = std::max(chain, longest_tile + longest_msg[c]);
      }
    }
    const std::int64_t compute_bound = (work + split.n_p - 1) / split.n_p;
    const std::int64_t comm_bound =
        queue.empty() ? 0 : *std::max_element(queue.begin(), queue.end());
    total += std::max({compute_bound, comm_bound, chain});
  }
  return total;
}

std::vector<std::string> audit_timeline(const SimProblem& problem,
                                        const SimResult& result) {
  std::vector<std::string> issues;
  const auto& split = problem.split;
  std::map<std::pair<int, std::int64_t>, const Interval*> by_task;
  std::vector<std::vector<const Interval*>> per_block(split.n);
  for (const auto& iv : result.intervals) {
    const int kind = iv.kind == BlockKind::kCompute ? 0 : 1;
    if (!by_task.emplace(std::make_pair(kind, iv.task_id), &iv).second) {
      issues.push_back("task " + std::to_string(iv.task_id) + " runs twice");
    }
    if (iv.block_id < 0 || iv.block_id >= split.n ||
        (iv.kind == BlockKind::kCompute) != (iv.block_id < split.n_p)) {
      issues.push_back("task " + std::to_string(iv.task_id) + " on a wrong block");
      continue;
    }
    per_block[iv.block_id].push_back(&iv);
  }
  for (std::int64_t b = 0; b < split.n; ++b) {
    auto& v = per_block[b];
    std::sort(v.begin(), v.end(), [](const Interval* x, const Interval* y) {
      return x->start_ns < y->start_ns;
    });
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (v[i]->start_ns < v[i - 1]->end_ns) {
        issues.push_back("block " + std::to_string(b) + " runs overlapping tasks " +
                         std::to_string(v[i - 1]->task_id) + " and " +
                         std::to_string(v[i]->task_id));
      }
    }
  }

  std::int64_t prev_phase_end = 0;
  for (std::size_t p = 0; p < problem.phases.size(); ++p) {
    const auto& ph = problem.phases[p];
    auto find = [&](int kind, std::int64_t id) -> const Interval* {
      const auto it = by_task.find({kind, id});
      return it == by_task.end() ? nullptr : it->second;
    };
    std::int64_t phase_end = prev_phase_end;
    for (const auto& t : ph.tiles) {
      const auto* iv = find(0, t.task_id);
      if (!iv) {
        issues.push_back("tile task " + std::to_string(t.task_id) + " never runs");
        continue;
      }
      phase_end = std::max(phase_end, iv->end_ns);
      if (iv->end_ns - iv->start_ns != t.duration) {
        issues.push_back("tile task " + std::to_string(t.task_id) + " has wrong length");
      }
      if (iv->start_ns < prev_phase_end) {
        issues.push_back("tile task " + std::to_string(t.task_id) +
                         " starts before the previous kernel ends");
      }
      for (auto d : t.deps) {
        const auto* m = find(1, ph.messages[d].task_id);
        if (!m || m->end_ns > iv->start_ns) {
          issues.push_back("tile task " + std::to_string(t.task_id) +
                           " starts before token " + std::to_string(ph.messages[d].token) +
                           " arrives");
        }
      }
    }
    for (const auto& msg : ph.messages) {
      const auto* m = find(1, msg.task_id);
      if (!m) {
        issues.push_back("message task " + std::to_string(msg.task_id) + " never runs");
        continue;
      }
      phase_end = std::max(phase_end, m->end_ns);
      if (m->end_ns - m->start_ns != msg.duration) {
        issues.push_back("message task " + std::to_string(msg.task_id) + " has wrong length");
      }
      if (m->block_id != split.n_p + msg.block) {
        issues.push_back("message task " + std::to_string(msg.task_id) +
                         " left its round-robin block");
      }
      if (m->start_ns < prev_phase_end) {
        issues.push_back("message task " + std::to_string(msg.task_id) +
                         " starts before the previous kernel ends");
      }
      if (msg.chunk >= 0) {
        for (auto i : ph.chunk_prereqs[msg.chunk]) {
          const auto* t = find(0, ph.tiles[i].task_id);
          if (t && t->end_ns > m->start_ns) {
            issues.push_back("reduce message task " + std::to_string(msg.task_id) +
                             " starts before tile task " +
                             std::to_string(ph.tiles[i].task_id) + " completes");
          }
        }
      }
    }
    prev_phase_end = phase_end;
  }
  return issues;
}

std::int64_t union_length(std::vector<std::pair<std::int64_t, std::int64_t>> spans) {
  return measure(merge_spans(std::move(spans)));
}

Json SimResult::to_json() const {
  std::int64_t bubble_total = 0;
  std::int64_t bubble_max = 0;
  for (auto b : bubble_ns) {
    bubble_total += b;
    bubble_max = std::max(bubble_max, b);
  }
  Json j;
  j["mode"] = mode;
  j["split"] = Json{{"n", split.n}, {"n_p", split.n_p}, {"n_c", split.n_c}};
  j["total_latency_ns"] = total_latency_ns;
  j["total_latency_us"] = total_latency_us();
  j["phase_end_ns"] = phase_end_ns;
  j["comm_busy_ns"] = comm_busy_ns;
  j["compute_busy_ns"] = compute_busy_ns;
  j["exposed_comm_ns"] = exposed_comm_ns;
  j["hidden_fraction"] = hidden_fraction;
  j["comm_work_ns"] = comm_work_ns;
  j["compute_work_ns"] = compute_work_ns;
  j["breakdown"] = Json{{"computation_ns", compute_busy_ns},
                        {"exposed_communication_ns", exposed_comm_ns},
                        {"hidden_communication_ns", comm_busy_ns - exposed_comm_ns}};
  j["bubble_ns_total"] = bubble_total;
  j["bubble_ns_max"] = bubble_max;
  j["bubble_ns"] = bubble_ns;
  return j;
}

std::string SimResult::timeline_csv() const {
  std::ostringstream os;
  os << "block_id,block_kind,task_id,start_ns,end_ns\n";
  for (const auto& iv : intervals) {
    os << iv.block_id << ',' << (iv.kind == BlockKind::kCompute ? "compute" : "comm")
       << ',' << iv.task_id << ',' << iv.start_ns << ',' << iv.end_ns << '\n';
  }
  return os.str();
}

}  // namespace moesim
