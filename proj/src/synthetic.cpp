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

#include "dashkv/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dashkv/errors.hpp"

namespace dashkv {

namespace {

// Modified Gram-Schmidt on a Gaussian matrix.
RealMatrix random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  RealMatrix m(n, n);
  fill_normal(m.data(), 1.0, rng);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = m.row(r);
    for (std::size_t p = 0; p < r; ++p) {
      const double c = dot(row, m.row(p));
      auto prev = m.row(p);
      for (std::size_t j = 0; j < n; ++j) row[j] -= c * prev[j];
    }
    const double norm = l2_norm(row);
    for (double& x : row) x /= norm;
  }
  return m;
}

RealMatrix matmul(const RealMatrix& a, const RealMatrix& b) {
  RealMatrix out(a.rows(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double s = a(r, k);
      if (s == 0.0) continue;
      auto br = b.row(k);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += s * br[c];
    }
  }
  return out;
}

RealMatrix transpose(const RealMatrix& a) {
  RealMatrix t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  }
  return t;
}

// basis^T diag(scale) basis, rows of `basis` being the eigenvectors.
RealMatrix spectral(const RealMatrix& basis, std::span<const double> scale) {
  RealMatrix scaled = basis;
  for (std::size_t r = 0; r < scaled.rows(); ++r) {
    for (double& x : scaled.row(r)) x *= scale[r];
  }
  return matmul(transpose(basis), scaled);
}

// Embed an (d-1)x(d-1) block in the data coordinates of a d x d matrix.
RealMatrix embed_data_block(const RealMatrix& block, double sink_entry) {
  const std::size_t d = block.rows() + 1;
  RealMatrix out(d, d);
  for (std::size_t r = 0; r + 1 < d; ++r) {
    for (std::size_t c = 0; c + 1 < d; ++c) out(r, c) = block(r, c);
  }
  out(d - 1, d - 1) = sink_entry;
  return out;
}

void renormalize_data(std::span<double> x) {
  const std::size_t data = x.size() - 1;
  const double norm = l2_norm(x.first(data));
  if (norm == 0.0) return;
  const double s = std::sqrt(static_cast<double>(x.size())) / norm;
  for (std::size_t j = 0; j < data; ++j) x[j] *= s;
}

RealMatrix attention_outputs(const RealMatrix& logits, const RealMatrix& v) {
  RealMatrix out(logits.rows(), v.cols());
  const std::size_t offset = v.rows() - logits.rows();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const std::size_t n = offset + r + 1;
    const Vec p = softmax(logits.row(r).first(n));
    auto o = out.row(r);
    for (std::size_t i = 0; i < n; ++i) {
      auto vi = v.row(i);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += p[i] * vi[c];
    }
  }
  return out;
}

}  // namespace

void validate(const SyntheticConfig& c) {
  if (c.n_layers == 0 || c.n_heads == 0) throw ConfigError("synthetic: need layers and heads");
  if (c.d < 2) throw ConfigError("synthetic: d must be >= 2");
  if (c.seq_len == 0) throw ConfigError("synthetic: seq_len must be >= 1");
  if (c.n_clusters == 0) throw ConfigError("synthetic: n_clusters must be >= 1");
  if (!(c.cluster_spread >= 0.0)) throw ConfigError("synthetic: cluster_spread < 0");
  if (!(c.anisotropy >= 1.0)) throw ConfigError("synthetic: anisotropy < 1");
  if (!(c.sharpness > 0.0)) throw ConfigError("synthetic: sharpness must be > 0");
  if (!(c.edge_focus >= 0.0)) throw ConfigError("synthetic: edge_focus < 0");
  if (!std::isfinite(c.sink_boost) || !std::isfinite(c.layer_drift) ||
      !std::isfinite(c.residual_gain)) {
    throw ConfigError("synthetic: non-finite knob");
  }
}

SyntheticModel make_synthetic_model(const SyntheticConfig& config) {
  validate(config);
  const std::size_t d = config.d;
  const std::size_t dd = d - 1;
  std::seed_seq seq{config.seed, std::uint64_t{0x4D4F44454C}};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SyntheticModel m;
  m.config = config;

  m.centers = RealMatrix(config.n_clusters, d);
  for (std::size_t c = 0; c < config.n_clusters; ++c) {
    auto row = m.centers.row(c).first(dd);
    fill_normal(row, 1.0, rng);
    const double norm = l2_norm(row);
    for (double& x : row) x /= norm;
  }

  m.salience_dir = Vec(d, 0.0);
  {
    auto u = std::span<double>(m.salience_dir).first(dd);
    fill_normal(u, 1.0, rng);
    const double norm = l2_norm(u);
    for (double& x : u) x /= norm;
  }

  // Anisotropy spectrum and the drifting frame it lives in.
  const double half_log = 0.5 * std::log(config.anisotropy);
  Vec scale(d);
  for (double& s : scale) s = std::exp((2.0 * unit(rng) - 1.0) * half_log);
  Vec inv_scale(d);
  for (std::size_t j = 0; j < d; ++j) inv_scale[j] = 1.0 / scale[j];
  const RealMatrix frame = random_orthogonal(d, rng);
  const RealMatrix drift_basis = random_orthogonal(d, rng);
  Vec plane_rate(d / 2);
  for (double& t : plane_rate) t = 0.5 + unit(rng);

  std::vector<RealMatrix> head_mix;
  std::vector<RealMatrix> head_value;
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    const RealMatrix basis = random_orthogonal(dd, rng);
    Vec weight(dd);
    for (double& w : weight) w = 0.6 + 0.8 * unit(rng);
    head_mix.push_back(embed_data_block(spectral(basis, weight), 1.0));
    head_value.push_back(embed_data_block(random_orthogonal(dd, rng), 0.0));
  }

  const double n = static_cast<double>(config.n_layers);
  const double width = std::max(1.0, n / 8.0);
  const double sqrt_d = std::sqrt(static_cast<double>(d));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const double li = static_cast<double>(l);
    const double focus =
        std::exp(-li / width) + std::exp(-(n - 1.0 - li) / width);
    const double kappa = config.sharpness * (1.0 + config.edge_focus * focus);
    m.sharpness.push_back(kappa);

    // G_l = B^T blockrot(l * drift * rate) B, applied to the frame rows.
    RealMatrix rot(d, d);
    for (std::size_t j = 0; j < d; ++j) rot(j, j) = 1.0;
    for (std::size_t p = 0; p < d / 2; ++p) {
      const double angle = li * config.layer_drift * plane_rate[p];
      const std::size_t a = 2 * p;
      const std::size_t b = 2 * p + 1;
      rot(a, a) = std::cos(angle);
      rot(a, b) = -std::sin(angle);
      rot(b, a) = std::sin(angle);
      rot(b, b) = std::cos(angle);
    }
    const RealMatrix g = matmul(transpose(drift_basis), matmul(rot, drift_basis));
    const RealMatrix layer_frame = matmul(frame, transpose(g));
    const RealMatrix a_mat = spectral(layer_frame, scale);
    const RealMatrix a_inv = spectral(layer_frame, inv_scale);

    std::vector<SyntheticHead> heads;
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      SyntheticHead head;
      head.wq = matmul(a_mat, head_mix[h]);
      for (double& x : head.wq.data()) x *= kappa;
      head.q_bias = Vec(d);
      for (std::size_t r = 0; r < d; ++r) head.q_bias[r] = head.wq(r, d - 1) * sqrt_d;
      head.wk = matmul(a_inv, head_mix[h]);
      head.wv = head_value[h];
      heads.push_back(std::move(head));
    }
    m.layers.push_back(std::move(heads));
  }
  return m;
}

RealMatrix sample_tokens(const SyntheticModel& model, std::size_t seq_len,
                         std::uint64_t stream) {
  const SyntheticConfig& c = model.config;
  const std::size_t d = c.d;
  std::seed_seq seq{c.seed, stream, std::uint64_t{0x544F4B454E}};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> pick(0, c.n_clusters - 1);
  const double noise = c.cluster_spread / std::sqrt(static_cast<double>(d - 1));

  RealMatrix x(seq_len, d);
  Vec eps(d - 1);
  for (std::size_t t = 0; t < seq_len; ++t) {
    const auto center = model.centers.row(pick(rng));
    fill_normal(eps, noise, rng);
    auto row = x.row(t);
    for (std::size_t j = 0; j + 1 < d; ++j) row[j] = center[j] + eps[j];
    row[d - 1] = t < c.n_sink_tokens ? c.sink_boost : 0.0;
    renormalize_data(row);
  }
  return x;
}

HeadProjections project_head(const SyntheticModel& model, const SyntheticHead& head,
                             const RealMatrix& x) {
  HeadProjections p{RealMatrix(x.rows(), x.cols()), RealMatrix(x.rows(), x.cols()),
                    RealMatrix(x.rows(), x.cols())};
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const Vec q = mat_vec(head.wq, x.row(t));
    const Vec k = mat_vec(head.wk, x.row(t));
    const Vec v = mat_vec(head.wv, x.row(t));
    auto qr = p.q.row(t);
    for (std::size_t j = 0; j < q.size(); ++j) qr[j] = q[j] + head.q_bias[j];
    const double salience =
        std::exp(model.config.key_salience * dot(model.salience_dir, x.row(t)));
    auto kr = p.k.row(t);
    for (std::size_t j = 0; j < k.size(); ++j) kr[j] = salience * k[j];
    std::copy(v.begin(), v.end(), p.v.row(t).begin());
  }
  return p;
}

void residual_update(const SyntheticModel& model, std::size_t layer,
                     std::span<const RealMatrix> head_outputs, RealMatrix& x) {
  const auto& heads = model.layers.at(layer);
  require_same_length(head_outputs.size(), heads.size(), "residual_update heads");
  const double g =
      model.config.residual_gain / static_cast<double>(heads.size());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    require_same_length(head_outputs[h].rows(), x.rows(), "residual_update rows");
    for (std::size_t t = 0; t < x.rows(); ++t) {
      const Vec back = vec_mat(head_outputs[h].row(t), heads[h].wv);
      auto row = x.row(t);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += g * back[j];
    }
  }
  for (std::size_t t = 0; t < x.rows(); ++t) renormalize_data(x.row(t));
}

std::vector<std::vector<AttentionTrace>> generate_traces(
    const SyntheticModel& model, std::size_t seq_len, std::uint64_t stream,
    std::span<const std::size_t> keep_layers) {
  const SyntheticConfig& c = model.config;
  RealMatrix x = sample_tokens(model, seq_len, stream);
  std::vector<std::vector<AttentionTrace>> out;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const bool keep =
        keep_layers.empty() ||
        std::find(keep_layers.begin(), keep_layers.end(), l) != keep_layers.end();
    std::vector<RealMatrix> outputs;
    std::vector<AttentionTrace> layer_traces;
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      HeadProjections p = project_head(model, model.layers[l][h], x);
      RealMatrix logits = AttentionTrace::compute_teacher_logits(p.q, p.k, c.d);
      outputs.push_back(attention_outputs(logits, p.v));
      if (keep) {
        layer_traces.push_back(AttentionTrace{
            static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h),
            static_cast<std::uint32_t>(c.d), std::move(p.q), std::move(p.k),
            std::move(p.v), std::move(logits)});
      }
    }
    if (keep) out.push_back(std::move(layer_traces));
    if (l + 1 < c.n_layers) residual_update(model, l, outputs, x);
  }
  return out;
}

std::vector<std::vector<AttentionTrace>> generate_traces(
    const SyntheticConfig& config) {
  return generate_traces(make_synthetic_model(config), config.seq_len,
                         config.stream);
}

}  // namespace dashkv
