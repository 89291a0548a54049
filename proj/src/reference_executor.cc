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

#include "moesim/reference_executor.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "moesim/errors.h"
#include "moesim/random.h"

namespace moesim {

DenseMatrix::DenseMatrix(std::int64_t rows, std::int64_t cols,
                         std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows < 0 || cols < 0 ||
      static_cast<std::int64_t>(data_.size()) != rows * cols) {
    throw ConfigError("matrix: element count does not match rows x cols");
  }
}

DenseMatrix DenseMatrix::column_slice(std::int64_t begin, std::int64_t end) const {
  DenseMatrix out(rows_, end - begin);
  for (std::int64_t r = 0; r < rows_; ++r) {
    for (std::int64_t c = begin; c < end; ++c) out(r, c - begin) = (*this)(r, c);
  }
  return out;
}

DenseMatrix DenseMatrix::row_slice(std::int64_t begin, std::int64_t end) const {
  DenseMatrix out(end - begin, cols_);
  std::copy(data_.begin() + begin * cols_, data_.begin() + end * cols_,
            out.data_.begin());
  return out;
}

DenseMatrix DenseMatrix::random(std::int64_t rows, std::int64_t cols,
                                std::uint64_t seed) {
  SplitMix64 rng(seed);
  DenseMatrix m(rows, cols);
  for (auto& v : m.data_) v = 2.0 * rng.unit() - 1.0;
  return m;
}

void ExpertWeights::validate(const ModelConfig& model) const {
  if (static_cast<std::int64_t>(w0.size()) != model.E ||
      static_cast<std::int64_t>(w1.size()) != model.E) {
    throw ConfigError("weights: expected one W0/W1 pair per expert");
  }
  for (std::int64_t e = 0; e < model.E; ++e) {
    if (w0[e].rows() != model.N || w1[e].cols() != model.N ||
        w0[e].cols() != w1[e].rows()) {
      throw ConfigError("weights: expert " + std::to_string(e) +
                        " has shapes inconsistent with N x K / K x N");
    }
  }
}

ExpertWeights ExpertWeights::random(const ModelConfig& model, std::uint64_t seed) {
  ExpertWeights w;
  for (std::int64_t e = 0; e < model.E; ++e) {
    w.w0.push_back(DenseMatrix::random(model.N, model.K, seed * 1315423911ull + 2 * e));
    w.w1.push_back(DenseMatrix::random(model.K, model.N, seed * 1315423911ull + 2 * e + 1));
  }
  return w;
}

ExpertWeights ExpertWeights::shard(std::int64_t index, std::int64_t count) const {
  ExpertWeights s;
  for (std::size_t e = 0; e < w0.size(); ++e) {
    const std::int64_t k = w0[e].cols();
    if (count < 1 || k % count != 0) {
      throw ConfigError("weights: hidden size is not divisible by shard count");
    }
    const std::int64_t width = k / count;
    s.w0.push_back(w0[e].column_slice(index * width, (index + 1) * width));
    s.w1.push_back(w1[e].row_slice(index * width, (index + 1) * width));
  }
  return s;
}

namespace {

void check_shapes(const DenseMatrix& input, const ExpertWeights& weights,
                  const RoutingTable& routing) {
  if (input.rows() != routing.num_tokens()) {
    throw ConfigError("input has " + std::to_string(input.rows()) +
                      " rows but routing has " +
                      std::to_string(routing.num_tokens()) + " tokens");
  }
  if (weights.num_experts() != routing.num_experts()) {
    throw ConfigError("weights and routing disagree on the expert count");
  }
  for (std::int64_t e = 0; e < weights.num_experts(); ++e) {
    if (weights.w0[e].rows() != input.cols() || weights.w1[e].cols() != input.cols() ||
        weights.w0[e].cols() != weights.w1[e].rows()) {
      throw ConfigError("expert " + std::to_string(e) +
                        " weights are inconsistent with the input width");
    }
  }
}

double hidden_element(std::span<const double> x, const DenseMatrix& w0,
                      std::int64_t col, const ExecOptions& options) {
  double acc = 0.0;
  for (std::int64_t n = 0; n < w0.rows(); ++n) acc += x[n] * w0(n, col);
  return options.activation ? options.activation(acc) : acc;
}

double output_element(std::span<const double> h, const DenseMatrix& w1,
                      std::int64_t col) {
  double acc = 0.0;
  for (std::int64_t k = 0; k < w1.rows(); ++k) acc += h[k] * w1(k, col);
  return acc;
}

}  // namespace

DenseMatrix execute_naive(const DenseMatrix& input, const ExpertWeights& weights,
                          const RoutingTable& routing, const ExecOptions& options) {
  check_shapes(input, weights, routing);
  const std::int64_t n = input.cols();
  DenseMatrix out(input.rows(), n);
  std::vector<double> hidden;
  for (std::int64_t t = 0; t < input.rows(); ++t) {
    const auto x = input.row(t);
    for (auto e : routing.token(t).experts) {
      const auto& w0 = weights.w0[e];
      const auto& w1 = weights.w1[e];
      hidden.assign(w0.cols(), 0.0);
      for (std::int64_t k = 0; k < w0.cols(); ++k) {
        hidden[k] = hidden_element(x, w0, k, options);
      }
      const double scale = options.combine_weight ? options.combine_weight(t, e) : 1.0;
      for (std::int64_t j = 0; j < n; ++j) {
        double y = output_element(hidden, w1, j);
        if (options.combine_weight) y *= scale;
        out(t, j) += y;
      }
    }
  }
  return out;
}

RankSchedules resolve_all(const RoutingTable& routing,
                          const SharedTensorMeta& meta0,
                          const SharedTensorMeta& meta1) {
  RankSchedules s;
  for (std::int64_t r = 0; r < routing.world(); ++r) {
    s.layer0.push_back(resolve_layer0(routing, r, meta0));
    s.layer1.push_back(resolve_layer1(routing, r, meta1));
  }
  return s;
}

namespace {

void require_valid(const TileSchedule& s, const RoutingTable& routing,
                   std::int64_t rank) {
  const auto v = validate_schedule(s, routing, rank);
  if (v.empty()) return;
  throw InvalidScheduleError("layer" + std::to_string(static_cast<int>(s.layer)) +
                             " schedule of rank " + std::to_string(rank) + ": " +
                             to_string(v.front().kind) + " (tile " +
                             std::to_string(v.front().tile_id) + "): " +
                             v.front().reason);
}

}  // namespace

DenseMatrix execute_scheduled(const DenseMatrix& input,
                              const ExpertWeights& weights,
                              const RoutingTable& routing,
                              const RankSchedules& schedules,
                              const ExecOptions& options) {
  check_shapes(input, weights, routing);
  if (routing.parallel().tp != 1) {
    throw ConfigError("execute_scheduled needs unsharded experts (tp == 1)");
  }
  const std::int64_t world = routing.world();
  if (static_cast<std::int64_t>(schedules.layer0.size()) != world ||
      static_cast<std::int64_t>(schedules.layer1.size()) != world) {
    throw ConfigError("need one layer0 and one layer1 schedule per rank");
  }
  const std::int64_t n = input.cols();

  // delivered[e] holds expert e's weighted output rows as the reduce chunks
  // release them. With tp == 1 every expert lives on exactly one rank.
  std::vector<DenseMatrix> delivered(routing.num_experts());
  for (auto& d : delivered) d = DenseMatrix(routing.num_tokens(), n);
  for (std::int64_t r = 0; r < world; ++r) {
    const auto& s0 = schedules.layer0[r];
    const auto& s1 = schedules.layer1[r];
    require_valid(s0, routing, r);
    require_valid(s1, routing, r);
    if (s0.meta.hidden_cols != weights.w0.front().cols()) {
      throw ConfigError("schedule hidden width does not match the weights");
    }

    const auto layout = sort_tokens_by_source(routing, r);
    std::map<std::int64_t, std::size_t> block_of;
    for (std::size_t b = 0; b < layout.size(); ++b) block_of[layout[b].expert] = b;
    const std::int64_t k_local = s0.meta.hidden_cols;
    std::vector<DenseMatrix> hidden(layout.size());
    std::vector<DenseMatrix> expert_out(layout.size());
    for (std::size_t b = 0; b < layout.size(); ++b) {
      const auto rows = static_cast<std::int64_t>(layout[b].tokens.size());
      hidden[b] = DenseMatrix(rows, k_local);
      expert_out[b] = DenseMatrix(rows, n);
    }

    for (const auto& tile : s0.tiles) {
      const auto b = block_of.at(tile.expert);
      const auto& w0 = weights.w0[tile.expert];
      for (std::int64_t row = tile.row_begin; row < tile.row_end; ++row) {
        const auto x = input.row(tile.tokens[row - tile.row_begin].token);
        for (std::int64_t c = tile.col_begin; c < tile.col_end; ++c) {
          hidden[b](row, c) = hidden_element(x, w0, c, options);
        }
      }
    }

    std::size_t next_chunk = 0;
    auto reduce = [&](const ReduceChunk& rc) {
      for (std::size_t b = 0; b < layout.size(); ++b) {
        const auto& toks = layout[b].tokens;
        auto& dst = delivered[layout[b].expert];
        for (std::size_t row = 0; row < toks.size(); ++row) {
          const auto t = toks[row].token;
          for (std::int64_t c = rc.col_begin; c < rc.col_end; ++c) {
            double y = expert_out[b](static_cast<std::int64_t>(row), c);
            if (options.combine_weight) y *= options.combine_weight(t, layout[b].expert);
            dst(t, c) = y;
          }
        }
      }
    };
    for (std::size_t pos = 0; pos < s1.tiles.size(); ++pos) {
      const auto& tile = s1.tiles[pos];
      const auto b = block_of.at(tile.expert);
      const auto& w1 = weights.w1[tile.expert];
      for (std::int64_t row = tile.row_begin; row < tile.row_end; ++row) {
        const auto h = hidden[b].row(row);
        for (std::int64_t c = tile.col_begin; c < tile.col_end; ++c) {
          expert_out[b](row, c) = output_element(h, w1, c);
        }
      }
      while (next_chunk < s1.reduce_chunks.size() &&
             s1.reduce_chunks[next_chunk].after_position <=
                 static_cast<std::int64_t>(pos + 1)) {
        reduce(s1.reduce_chunks[next_chunk++]);
      }
    }
    while (next_chunk < s1.reduce_chunks.size()) reduce(s1.reduce_chunks[next_chunk++]);
  }

  // Destination-side combine in the token's routed expert order. Summing
  // per-rank partials instead would reassociate the topk sum whenever a
  // token's experts span ranks.
  DenseMatrix out(input.rows(), n);
  for (std::int64_t t = 0; t < input.rows(); ++t) {
    for (auto e : routing.token(t).experts) {
      for (std::int64_t c = 0; c < n; ++c) out(t, c) += delivered[e](t, c);
    }
  }
  return out;
}

DenseMatrix execute_tp_sharded(const DenseMatrix& input,
                               const ExpertWeights& weights,
                               const RoutingTable& routing, std::int64_t tp) {
  DenseMatrix out(input.rows(), input.cols());
  for (std::int64_t s = 0; s < tp; ++s) {
    const auto part = execute_naive(input, weights.shard(s, tp), routing);
    for (std::int64_t t = 0; t < out.rows(); ++t) {
      for (std::int64_t c = 0; c < out.cols(); ++c) out(t, c) += part(t, c);
    }
  }
  return out;
}

MatrixDiff first_difference(const DenseMatrix& a, const DenseMatrix& b) {
  MatrixDiff d;
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    d.equal = false;
    return d;
  }
  for (std::int64_t r = 0; r < a.rows(); ++r) {
    for (std::int64_t c = 0; c < a.cols(); ++c) {
      const double x = a(r, c);
      const double y = b(r, c);
      if (std::memcmp(&x, &y, sizeof(double)) != 0) {
        return {false, r, c, x, y};
      }
    }
  }
  return d;
}

double max_relative_error(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    const double scale = std::max(std::abs(x), std::abs(y));
    if (scale == 0.0) continue;
    worst = std::max(worst, std::abs(x - y) / scale);
  }
  return worst;
}

}  // namespace moesim
