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

#include "dashkv/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "dashkv/errors.hpp"

namespace dashkv {

namespace {

RealMatrix he_normal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  RealMatrix m(rows, cols);
  fill_normal(m.data(), std::sqrt(2.0 / static_cast<double>(rows)), rng);
  return m;
}

Vec tanh_scaled(std::span<const double> v, double beta) {
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::tanh(beta * v[i]);
  return out;
}

}  // namespace

QueryEncoderParams QueryEncoderParams::init(std::size_t d, std::size_t l,
                                            std::mt19937_64& rng) {
  if (d == 0 || l == 0) throw DimensionError("QueryEncoderParams: zero dim");
  QueryEncoderParams p;
  p.w1 = he_normal(d, kQueryHidden, rng);
  p.ln_gain.assign(kQueryHidden, 1.0);
  p.ln_bias.assign(kQueryHidden, 0.0);
  p.w2 = he_normal(kQueryHidden, kQueryHidden, rng);
  p.w3 = he_normal(kQueryHidden, l, rng);
  return p;
}

QueryEncoderParams QueryEncoderParams::zeros_like(const QueryEncoderParams& p) {
  QueryEncoderParams z;
  z.w1 = RealMatrix(p.w1.rows(), p.w1.cols());
  z.ln_gain.assign(p.ln_gain.size(), 0.0);
  z.ln_bias.assign(p.ln_bias.size(), 0.0);
  z.w2 = RealMatrix(p.w2.rows(), p.w2.cols());
  z.w3 = RealMatrix(p.w3.rows(), p.w3.cols());
  return z;
}

KeyEncoderParams KeyEncoderParams::init(std::size_t d, std::size_t l,
                                        std::mt19937_64& rng) {
  if (d == 0 || l == 0) throw DimensionError("KeyEncoderParams: zero dim");
  return {he_normal(d, l, rng)};
}

KeyEncoderParams KeyEncoderParams::zeros_like(const KeyEncoderParams& p) {
  return {RealMatrix(p.wk.rows(), p.wk.cols())};
}

double beta_schedule(std::size_t global_step) {
  return std::min(10.0, 1.0 + static_cast<double>(global_step) * 0.001);
}

Vec query_logits(std::span<const double> q, const QueryEncoderParams& params,
                 QueryForwardCache* cache) {
  if (q.size() != params.input_dim()) {
    throw DimensionError("query encoder: expected d=" +
                         std::to_string(params.input_dim()) + ", got " +
                         std::to_string(q.size()));
  }
  QueryForwardCache local;
  QueryForwardCache& c = cache != nullptr ? *cache : local;
  c.ops = {};
  c.input.assign(q.begin(), q.end());

  c.a1 = vec_mat(q, params.w1);
  ++c.ops.matmuls;
  c.n1 = layer_norm(c.a1, params.ln_gain, params.ln_bias, kLayerNormEps, &c.ln);
  ++c.ops.normalizations;
  c.h1.resize(c.n1.size());
  std::transform(c.n1.begin(), c.n1.end(), c.h1.begin(), gelu);
  ++c.ops.activations;

  c.a2 = vec_mat(c.h1, params.w2);
  ++c.ops.matmuls;
  c.h2.resize(c.a2.size());
  std::transform(c.a2.begin(), c.a2.end(), c.h2.begin(), gelu);
  ++c.ops.activations;

  c.v = vec_mat(c.h2, params.w3);
  ++c.ops.matmuls;
  return c.v;
}

Vec query_encode_relaxed(std::span<const double> q,
                         const QueryEncoderParams& params, std::size_t step,
                         QueryForwardCache* cache) {
  QueryForwardCache local;
  QueryForwardCache& c = cache != nullptr ? *cache : local;
  query_logits(q, params, &c);
  c.beta = beta_schedule(step);
  c.out = tanh_scaled(c.v, c.beta);
  return c.out;
}

BitCode query_encode(std::span<const double> q,
                     const QueryEncoderParams& params) {
  return sign_binarize(query_logits(q, params));
}

Vec query_encode_backward(std::span<const double> grad_out,
                          const QueryEncoderParams& params,
                          const QueryForwardCache& cache,
                          QueryEncoderParams& grads) {
  require_same_length(grad_out.size(), cache.out.size(), "query backward");

  Vec g_v(grad_out.size());
  for (std::size_t i = 0; i < g_v.size(); ++i) {
    g_v[i] = grad_out[i] * cache.beta * (1.0 - cache.out[i] * cache.out[i]);
  }
  add_outer(grads.w3, cache.h2, g_v);
  Vec g_a2 = mat_vec(params.w3, g_v);
  for (std::size_t i = 0; i < g_a2.size(); ++i) g_a2[i] *= gelu_grad(cache.a2[i]);

  add_outer(grads.w2, cache.h1, g_a2);
  Vec g_n1 = mat_vec(params.w2, g_a2);
  for (std::size_t i = 0; i < g_n1.size(); ++i) g_n1[i] *= gelu_grad(cache.n1[i]);

  const LayerNormGrads ln = layer_norm_backward(g_n1, params.ln_gain, cache.ln);
  for (std::size_t i = 0; i < ln.gain.size(); ++i) {
    grads.ln_gain[i] += ln.gain[i];
    grads.ln_bias[i] += ln.bias[i];
  }
  add_outer(grads.w1, cache.input, ln.input);
  return mat_vec(params.w1, ln.input);
}

Vec key_logits(std::span<const double> k, const KeyEncoderParams& params,
               KeyForwardCache* cache) {
  if (k.size() != params.input_dim()) {
    throw DimensionError("key encoder: expected d=" +
                         std::to_string(params.input_dim()) + ", got " +
                         std::to_string(k.size()));
  }
  Vec z = vec_mat(k, params.wk);
  if (cache != nullptr) {
    cache->ops = {1, 0, 0};
    cache->input.assign(k.begin(), k.end());
    cache->z = z;
  }
  return z;
}

Vec key_encode_relaxed(std::span<const double> k,
                       const KeyEncoderParams& params, std::size_t step,
                       KeyForwardCache* cache) {
  KeyForwardCache local;
  KeyForwardCache& c = cache != nullptr ? *cache : local;
  key_logits(k, params, &c);
  c.beta = beta_schedule(step);
  c.out = tanh_scaled(c.z, c.beta);
  return c.out;
}

BitCode key_encode(std::span<const double> k, const KeyEncoderParams& params) {
  return sign_binarize(key_logits(k, params));
}

Vec key_encode_backward(std::span<const double> grad_out,
                        const KeyEncoderParams& params,
                        const KeyForwardCache& cache, KeyEncoderParams& grads) {
  require_same_length(grad_out.size(), cache.out.size(), "key backward");
  Vec g_z(grad_out.size());
  for (std::size_t i = 0; i < g_z.size(); ++i) {
    g_z[i] = grad_out[i] * cache.beta * (1.0 - cache.out[i] * cache.out[i]);
  }
  add_outer(grads.wk, cache.input, g_z);
  return mat_vec(params.wk, g_z);
}

}  // namespace dashkv
