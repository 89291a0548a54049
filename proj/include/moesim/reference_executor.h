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

#ifndef MOESIM_REFERENCE_EXECUTOR_H_
#define MOESIM_REFERENCE_EXECUTOR_H_

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "moesim/dependency_resolver.h"
#include "moesim/moe_config.h"

namespace moesim {

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::int64_t rows, std::int64_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows * cols), fill) {}
  // Throws ConfigError when data.size() != rows * cols.
  DenseMatrix(std::int64_t rows, std::int64_t cols, std::vector<double> data);

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  double& operator()(std::int64_t r, std::int64_t c) { return data_[r * cols_ + c]; }
  double operator()(std::int64_t r, std::int64_t c) const {
    return data_[r * cols_ + c];
  }
  std::span<const double> row(std::int64_t r) const {
    return {data_.data() + r * cols_, static_cast<std::size_t>(cols_)};
  }
  const std::vector<double>& data() const { return data_; }

  // Columns [begin, end) as a new matrix.
  DenseMatrix column_slice(std::int64_t begin, std::int64_t end) const;
  // Rows [begin, end) as a new matrix.
  DenseMatrix row_slice(std::int64_t begin, std::int64_t end) const;

  static DenseMatrix random(std::int64_t rows, std::int64_t cols,
                            std::uint64_t seed);

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  std::vector<double> data_;
};

// W0[e] is N x K, W1[e] is K x N.
struct ExpertWeights {
  std::vector<DenseMatrix> w0;
  std::vector<DenseMatrix> w1;

  std::int64_t num_experts() const { return static_cast<std::int64_t>(w0.size()); }
  void validate(const ModelConfig& model) const;

  static ExpertWeights random(const ModelConfig& model, std::uint64_t seed);

  // Hidden-dimension shard `index` of `count`: W0 columns and W1 rows.
  ExpertWeights shard(std::int64_t index, std::int64_t count) const;
};

struct ExecOptions {
  // Elementwise function applied to the hidden activations; identity when
  // empty.
  std::function<double(double)> activation;
  // Combine weight for (token, expert); unweighted sum when empty.
  std::function<double(std::int64_t, std::int64_t)> combine_weight;
};

// out[t] = sum over e in topk(t), ascending e, of act(x_t * W0_e) * W1_e.
// Every dot product accumulates in ascending index order from 0.0.
DenseMatrix execute_naive(const DenseMatrix& input, const ExpertWeights& weights,
                          const RoutingTable& routing,
                          const ExecOptions& options = {});

// One layer0 and one layer1 schedule per rank, indexed by rank.
struct RankSchedules {
  std::vector<TileSchedule> layer0;
  std::vector<TileSchedule> layer1;
};

RankSchedules resolve_all(const RoutingTable& routing,
                          const SharedTensorMeta& meta0,
                          const SharedTensorMeta& meta1);

// Executes tiles in schedule order: layer0 tiles fill per-expert hidden
// buffers, layer1 tiles fill per-expert output buffers, and each reduce
// chunk combines its column block once its prerequisites are done. Requires
// tp == 1 (unsharded experts). Throws InvalidScheduleError if any schedule
// fails validation and ConfigError on shape mismatch.
DenseMatrix execute_scheduled(const DenseMatrix& input,
                              const ExpertWeights& weights,
                              const RoutingTable& routing,
                              const RankSchedules& schedules,
                              const ExecOptions& options = {});

// Computes each of `tp` hidden shards independently and sums the partial
// outputs in ascending shard order.
DenseMatrix execute_tp_sharded(const DenseMatrix& input,
                               const ExpertWeights& weights,
                               const RoutingTable& routing, std::int64_t tp);

struct MatrixDiff {
  bool equal = true;
  std::int64_t row = -1;
  std::int64_t col = -1;
  double lhs = 0.0;
  double rhs = 0.0;
};

// Bitwise comparison; reports the first differing element in row-major order.
MatrixDiff first_difference(const DenseMatrix& a, const DenseMatrix& b);

// Largest elementwise |a - b| / max(|a|, |b|); 0 where both are zero.
double max_relative_error(const DenseMatrix& a, const DenseMatrix& b);

}  // namespace moesim

#endif  // MOESIM_REFERENCE_EXECUTOR_H_
