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

#include "dashkv/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "dashkv/errors.hpp"

namespace dashkv {

RealMatrix::RealMatrix(std::size_t rows, std::size_t cols, Vec data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("RealMatrix: data length " +
                         std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

void RealMatrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool RealMatrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double x) { return std::isfinite(x); });
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

Vec vec_mat(std::span<const double> x, const RealMatrix& m) {
  require_same_length(x.size(), m.rows(), "vec_mat");
  Vec y(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < y.size(); ++c) y[c] += xr * row[c];
  }
  return y;
}

Vec mat_vec(const RealMatrix& m, std::span<const double> x) {
  require_same_length(x.size(), m.cols(), "mat_vec");
  Vec y(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
  return y;
}

void add_outer(RealMatrix& m, std::span<const double> a,
               std::span<const double> b, double scale) {
  require_same_length(a.size(), m.rows(), "add_outer rows");
  require_same_length(b.size(), m.cols(), "add_outer cols");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double ar = scale * a[r];
    if (ar == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += ar * b[c];
  }
}

double gelu(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

double gelu_grad(double x) {
  const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi /
                     std::numbers::sqrt2;
  return cdf + x * pdf;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vec layer_norm(std::span<const double> v, std::span<const double> gain,
               std::span<const double> bias, double eps,
               LayerNormCache* cache) {
  require_same_length(v.size(), gain.size(), "layer_norm gain");
  require_same_length(v.size(), bias.size(), "layer_norm bias");
  if (v.empty()) throw DimensionError("layer_norm: empty input");
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");

  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  const double inv_sigma = 1.0 / std::sqrt(var + eps);

  Vec out(v.size());
  Vec normalized(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    normalized[i] = (v[i] - mean) * inv_sigma;
    out[i] = gain[i] * normalized[i] + bias[i];
  }
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_sigma = inv_sigma;
  }
  return out;
}

LayerNormGrads layer_norm_backward(std::span<const double> grad_out,
                                   std::span<const double> gain,
                                   const LayerNormCache& cache) {
  const std::size_t n = grad_out.size();
  require_same_length(n, gain.size(), "layer_norm_backward gain");
  require_same_length(n, cache.normalized.size(), "layer_norm_backward cache");

  LayerNormGrads g{Vec(n), Vec(n), Vec(grad_out.begin(), grad_out.end())};
  double mean_gx = 0.0;
  double mean_gx_x = 0.0;
  Vec gx(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.gain[i] = grad_out[i] * cache.normalized[i];
    gx[i] = grad_out[i] * gain[i];
    mean_gx += gx[i];
    mean_gx_x += gx[i] * cache.normalized[i];
  }
  mean_gx /= static_cast<double>(n);
  mean_gx_x /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.input[i] = cache.inv_sigma *
                 (gx[i] - mean_gx - cache.normalized[i] * mean_gx_x);
  }
  return g;
}

namespace {

double max_finite(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) {
    if (std::isnan(x)) throw DomainError("softmax: NaN logit");
    if (x == std::numeric_limits<double>::infinity()) {
      throw DomainError("softmax: +inf logit");
    }
    m = std::max(m, x);
  }
  if (m == -std::numeric_limits<double>::infinity()) {
    throw DegenerateInputError("softmax: every entry is masked");
  }
  return m;
}

}  // namespace

Vec softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("softmax: temperature must be > 0");
  const double m = max_finite(v);
  Vec out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::isinf(v[i]) ? 0.0 : std::exp((v[i] - m) / temperature);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

Vec log_softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) {
    throw DomainError("log_softmax: temperature must be > 0");
  }
  const double m = max_finite(v);
  double z = 0.0;
  for (double x : v) {
    if (!std::isinf(x)) z += std::exp((x - m) / temperature);
  }
  const double log_z = std::log(z);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::isinf(v[i]) ? -std::numeric_limits<double>::infinity()
                              : (v[i] - m) / temperature - log_z;
  }
  return out;
}

GradCheckReport finite_diff_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> params, std::span<const double> analytic_grad,
    double h) {
  require_same_length(params.size(), analytic_grad.size(), "finite_diff_check");
  if (!(h > 0.0)) throw DomainError("finite_diff_check: h must be > 0");

  Vec x(params.begin(), params.end());
  GradCheckReport report;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw EvaluationError("finite_diff_check: non-finite f at coordinate " +
                            std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic_grad[i];
    const double scale = std::max({1.0, std::abs(a), std::abs(numeric)});
    const double err = std::abs(a - numeric) / scale;
    if (err > report.max_relative_error || i == 0) {
      report = {err, i, a, numeric};
    }
  }
  return report;
}

std::size_t nearest_rank(double percent, std::size_t n) {
  if (n == 0) throw DegenerateInputError("percentile of an empty set");
  if (!(percent >= 0.0 && percent <= 100.0)) {
    throw DomainError("percentile must lie in [0, 100]");
  }
  // p * n / 100 is exact for integral p; the slack absorbs rounding for the
  // rest without moving an exact integer rank.
  const double raw = percent * static_cast<double>(n) / 100.0;
  auto rank = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(rank, 1, n);
}

double percentile(std::span<const double> values, double percent) {
  const std::size_t rank = nearest_rank(percent, values.size());
  Vec copy(values.begin(), values.end());
  auto nth = copy.begin() + static_cast<std::ptrdiff_t>(rank - 1);
  std::nth_element(copy.begin(), nth, copy.end());
  return *nth;
}

void fill_normal(std::span<double> out, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& x : out) x = dist(rng);
}

}  // namespace dashkv
