// Copyright 2026 the dashkv authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace dashkv {

using Vec = std::vector<double>;

/// Dense row-major matrix of doubles.
class RealMatrix {
 public:
  RealMatrix() = default;
  RealMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  RealMatrix(std::size_t rows, std::size_t cols, Vec data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  void fill(double value);
  bool all_finite() const;

  friend bool operator==(const RealMatrix&, const RealMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

constexpr double kLayerNormEps = 1e-5;

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

/// y = x^T M  (x has M.rows() entries, y has M.cols()).
Vec vec_mat(std::span<const double> x, const RealMatrix& m);
/// y = M x  (x has M.cols() entries).
Vec mat_vec(const RealMatrix& m, std::span<const double> x);
/// M += scale * a b^T
void add_outer(RealMatrix& m, std::span<const double> a,
               std::span<const double> b, double scale = 1.0);

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
double gelu(double x);
double gelu_grad(double x);
double sigmoid(double x);

struct LayerNormCache {
  Vec normalized;  // (v - mean) / sigma, before gain and bias
  double inv_sigma = 0.0;
};

Vec layer_norm(std::span<const double> v, std::span<const double> gain,
               std::span<const double> bias, double eps = kLayerNormEps,
               LayerNormCache* cache = nullptr);

struct LayerNormGrads {
  Vec input;
  Vec gain;
  Vec bias;
};

LayerNormGrads layer_norm_backward(std::span<const double> grad_out,
                                   std::span<const double> gain,
                                   const LayerNormCache& cache);

/// Tempered softmax. -inf entries map to exactly 0. Throws
/// DegenerateInputError if every entry is -inf.
Vec softmax(std::span<const double> v, double temperature = 1.0);

/// log(softmax(v / temperature)); -inf entries stay -inf.
Vec log_softmax(std::span<const double> v, double temperature = 1.0);

/// Central-difference gradient check. Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckReport finite_diff_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> params, std::span<const double> analytic_grad,
    double h = 1e-5);

/// Number of elements at or below the nearest-rank p-th percentile of n
/// items: ceil(p/100 * n), with p = 0 mapping to 1. Requires n >= 1.
std::size_t nearest_rank(double percent, std::size_t n);

/// Nearest-rank percentile value: sorted[nearest_rank(p, n) - 1].
double percentile(std::span<const double> values, double percent);

/// Fill with N(0, stddev^2) draws.
void fill_normal(std::span<double> out, double stddev, std::mt19937_64& rng);

}  // namespace dashkv
