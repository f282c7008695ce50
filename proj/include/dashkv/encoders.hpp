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

// Asymmetric hash encoders.
//
// Queries go through a 3-layer MLP
//     v_q = W3^T GELU(W2^T GELU(LayerNorm(W1^T q)))
// and keys through one projection z_k = Wk^T k. Vectors are treated as
// rows, so W1 is d x 256 and Wk is d x l. Training uses tanh(beta * .) as
// a differentiable stand-in for sign, with beta annealed by global step.

#pragma once

#include <cstddef>
#include <random>
#include <span>

#include "dashkv/hashing.hpp"
#include "dashkv/numerics.hpp"

namespace dashkv {

constexpr std::size_t kQueryHidden = 256;

struct QueryEncoderParams {
  RealMatrix w1;  // d x 256
  Vec ln_gain;    // 256
  Vec ln_bias;    // 256
  RealMatrix w2;  // 256 x 256
  RealMatrix w3;  // 256 x l

  std::size_t input_dim() const noexcept { return w1.rows(); }
  std::size_t code_bits() const noexcept { return w3.cols(); }

  /// He-style init (std sqrt(2/fan_in)); gain 1, bias 0.
  static QueryEncoderParams init(std::size_t d, std::size_t l,
                                 std::mt19937_64& rng);
  /// Same shapes, every entry zero. Used as a gradient accumulator.
  static QueryEncoderParams zeros_like(const QueryEncoderParams& p);

  /// Visit every tensor in a fixed order (w1, ln_gain, ln_bias, w2, w3).
  template <typename F>
  void for_each_tensor(F&& f) {
    f(w1.data());
    f(std::span<double>(ln_gain));
    f(std::span<double>(ln_bias));
    f(w2.data());
    f(w3.data());
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    f(w1.data());
    f(std::span<const double>(ln_gain));
    f(std::span<const double>(ln_bias));
    f(w2.data());
    f(w3.data());
  }

  friend bool operator==(const QueryEncoderParams&,
                         const QueryEncoderParams&) = default;
};

struct KeyEncoderParams {
  RealMatrix wk;  // d x l

  std::size_t input_dim() const noexcept { return wk.rows(); }
  std::size_t code_bits() const noexcept { return wk.cols(); }

  static KeyEncoderParams init(std::size_t d, std::size_t l,
                               std::mt19937_64& rng);
  static KeyEncoderParams zeros_like(const KeyEncoderParams& p);

  template <typename F>
  void for_each_tensor(F&& f) {
    f(wk.data());
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    f(wk.data());
  }

  friend bool operator==(const KeyEncoderParams&,
                         const KeyEncoderParams&) = default;
};

/// Tanh sharpness: min(10, 1 + 0.001 * step).
double beta_schedule(std::size_t global_step);

/// Counts of the primitive stages executed by one forward pass.
struct ForwardOpCounts {
  int matmuls = 0;
  int activations = 0;
  int normalizations = 0;
};

/// Activations kept for the query backward pass.
struct QueryForwardCache {
  Vec input;
  Vec a1;
  LayerNormCache ln;
  Vec n1;
  Vec h1;
  Vec a2;
  Vec h2;
  Vec v;    // pre-tanh logits
  Vec out;  // tanh(beta * v)
  double beta = 1.0;
  ForwardOpCounts ops;
};

/// v_q, the pre-binarization query logits.
Vec query_logits(std::span<const double> q, const QueryEncoderParams& params,
                 QueryForwardCache* cache = nullptr);

Vec query_encode_relaxed(std::span<const double> q,
                         const QueryEncoderParams& params, std::size_t step,
                         QueryForwardCache* cache = nullptr);

/// sign(v_q). No tanh on the inference path.
BitCode query_encode(std::span<const double> q, const QueryEncoderParams& params);

/// Accumulate dLoss/dparams into `grads` given dLoss/d(relaxed output).
/// Returns dLoss/dq.
Vec query_encode_backward(std::span<const double> grad_out,
                          const QueryEncoderParams& params,
                          const QueryForwardCache& cache,
                          QueryEncoderParams& grads);

struct KeyForwardCache {
  Vec input;
  Vec z;    // pre-tanh projection
  Vec out;  // tanh(beta * z)
  double beta = 1.0;
  ForwardOpCounts ops;
};

Vec key_logits(std::span<const double> k, const KeyEncoderParams& params,
               KeyForwardCache* cache = nullptr);

Vec key_encode_relaxed(std::span<const double> k,
                       const KeyEncoderParams& params, std::size_t step,
                       KeyForwardCache* cache = nullptr);

/// sign(Wk^T k); computed once per key at cache-write time.
BitCode key_encode(std::span<const double> k, const KeyEncoderParams& params);

/// Accumulate into `grads`; returns dLoss/dk.
Vec key_encode_backward(std::span<const double> grad_out,
                        const KeyEncoderParams& params,
                        const KeyForwardCache& cache, KeyEncoderParams& grads);

/// Flatten any parameter struct exposing for_each_tensor.
template <typename Params>
Vec flatten(const Params& p) {
  Vec out;
  p.for_each_tensor([&](std::span<const double> t) {
    out.insert(out.end(), t.begin(), t.end());
  });
  return out;
}

/// Inverse of flatten; `p` provides the shapes.
template <typename Params>
void unflatten(std::span<const double> flat, Params& p) {
  std::size_t offset = 0;
  p.for_each_tensor([&](std::span<double> t) {
    for (double& x : t) x = flat[offset++];
  });
}

}  // namespace dashkv
