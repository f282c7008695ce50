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

// Synthetic multi-layer attention stack standing in for a frozen LLM.
//
// Tokens are clustered unit-norm embeddings (scaled to sqrt(d)) living in
// the first d - 1 coordinates; the last coordinate is a sink axis that only
// the first few tokens populate and every query carries a bias along. Each
// (layer, head) reads
//
//   q = kappa_l A_l C_h (x + sqrt(d) e_sink),   k = A_l^-1 C_h x,
//   v = P_h x,
//
// with A_l = R_l diag(a) R_l^T anisotropic and R_l drifting with depth, so
// q.k = kappa_l x^T C_h^2 x' while raw Q and K are distorted in opposite
// directions. kappa_l is sharper near both ends of the stack. The stream
// update is x <- renorm(x + g mean_h P_h^T attn_h), renormalizing only the
// data coordinates.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dashkv/numerics.hpp"
#include "dashkv/training.hpp"

namespace dashkv {

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t n_layers = 4;
  std::size_t n_heads = 2;
  std::size_t d = 32;
  std::size_t seq_len = 512;
  std::size_t n_clusters = 8;
  double cluster_spread = 0.5;
  /// Logit bonus of the sink tokens at unit sharpness.
  double sink_boost = 4.0;
  /// Rotation (radians per layer, per plane) of the anisotropy axes.
  double layer_drift = 0.15;
  std::size_t n_sink_tokens = 4;
  /// Condition number of A_l.
  double anisotropy = 3.0;
  /// Sharpness in the middle of the stack.
  double sharpness = 1.0;
  /// Extra relative sharpness at the first and last layer.
  double edge_focus = 1.0;
  double residual_gain = 0.5;
  /// Keys are scaled by exp(key_salience * u.x) for a fixed unit u.
  double key_salience = 0.0;
  /// Token stream; streams share the model and differ in sampled tokens.
  std::uint64_t stream = 0;

  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

/// Throws ConfigError when the config cannot describe a stack.
void validate(const SyntheticConfig& config);

struct SyntheticHead {
  RealMatrix wq;  // d x d, q = wq x + q_bias
  Vec q_bias;
  RealMatrix wk;  // d x d
  RealMatrix wv;  // d x d
};

struct SyntheticModel {
  SyntheticConfig config;
  RealMatrix centers;  // n_clusters x d
  std::vector<double> sharpness;
  Vec salience_dir;  // unit, data coordinates only
  std::vector<std::vector<SyntheticHead>> layers;  // [layer][head]
};

/// Depends on every field except seq_len and stream.
SyntheticModel make_synthetic_model(const SyntheticConfig& config);

/// seq_len x d input embeddings of the configured stream.
RealMatrix sample_tokens(const SyntheticModel& model, std::size_t seq_len,
                         std::uint64_t stream);

struct HeadProjections {
  RealMatrix q;
  RealMatrix k;
  RealMatrix v;
};

HeadProjections project_head(const SyntheticModel& model, const SyntheticHead& head,
                             const RealMatrix& x);

/// x <- renorm(x + g * mean_h wv_h^T out_h), in place.
void residual_update(const SyntheticModel& model, std::size_t layer,
                     std::span<const RealMatrix> head_outputs, RealMatrix& x);

/// Full-precision pass; returns one [head] vector per recorded layer, in
/// layer order. Layers not listed in `keep_layers` (empty = all) are
/// simulated but not recorded.
std::vector<std::vector<AttentionTrace>> generate_traces(
    const SyntheticModel& model, std::size_t seq_len, std::uint64_t stream,
    std::span<const std::size_t> keep_layers = {});

/// Convenience: model and stream both from `config`.
std::vector<std::vector<AttentionTrace>> generate_traces(
    const SyntheticConfig& config);

}  // namespace dashkv
