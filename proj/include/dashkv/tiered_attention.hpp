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

// Mixed-precision attention over a hashed KV cache.
//
// Every key is scored in one of four tiers:
//   Prior         always-kept sink/local indices, exact q.k / sqrt(d)
//   Full          D_final <= t1, exact q.k / sqrt(d)
//   HashResidual  t1 < D_final <= t2, (l - 2H) / l + residual MLP
//   Masked        D_final > t2, probability exactly 0
// t1 and t2 are nearest-rank percentiles of D_final over the non-prior keys
// of one head at one decode step.

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dashkv/calibration.hpp"
#include "dashkv/encoders.hpp"
#include "dashkv/hashing.hpp"
#include "dashkv/numerics.hpp"

namespace dashkv {

struct PriorPolicy {
  std::size_t n_sink = 4;
  std::size_t n_local = 8;
  std::vector<std::size_t> extra_indices;
};

/// Sorted, deduplicated always-retain set. Out-of-range extras are
/// dropped and counted in *dropped when given.
std::vector<std::size_t> build_prior_set(std::size_t seq_len,
                                         const PriorPolicy& policy,
                                         std::size_t* dropped = nullptr);

struct Thresholds {
  double t1 = 0.0;
  double t2 = 0.0;
};

Thresholds compute_thresholds(std::span<const double> d_final, double p1,
                              double p2);

enum class Tier : std::uint8_t { kPrior, kFull, kHashResidual, kMasked };

using TierAssignment = std::vector<Tier>;

struct TierCounts {
  std::size_t prior = 0;
  std::size_t full = 0;
  std::size_t hash_residual = 0;
  std::size_t masked = 0;
};

TierCounts count_tiers(const TierAssignment& tiers);

/// `prior` must be sorted (as returned by build_prior_set).
TierAssignment assign_tiers(std::span<const double> d_final, double t1,
                            double t2, std::span<const std::size_t> prior);

/// Residual MLP: [h_q ; h_k] (2l) -> GELU hidden -> scalar.
struct ResidualParams {
  RealMatrix w_hidden;  // 2l x width
  Vec b_hidden;         // width
  Vec w_out;            // width
  Vec b_out;            // 1
  /// Multiplier applied to hash-tier scores before the shared softmax:
  /// tau_teacher / tau_student of the distillation that trained this head.
  double logit_scale = 20.0;

  std::size_t code_bits() const noexcept { return w_hidden.rows() / 2; }
  std::size_t width() const noexcept { return w_hidden.cols(); }

  /// Hidden layer He-initialized; output weights uniform in +-1e-5 and
  /// output bias 0, so the correction starts out negligible.
  static ResidualParams init(std::size_t l, std::size_t width,
                             std::mt19937_64& rng, double logit_scale = 20.0);
  static ResidualParams zeros_like(const ResidualParams& p);

  template <typename F>
  void for_each_tensor(F&& f) {
    f(w_hidden.data());
    f(std::span<double>(b_hidden));
    f(std::span<double>(w_out));
    f(std::span<double>(b_out));
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    f(w_hidden.data());
    f(std::span<const double>(b_hidden));
    f(std::span<const double>(w_out));
    f(std::span<const double>(b_out));
  }

  friend bool operator==(const ResidualParams&, const ResidualParams&) = default;
};

constexpr std::size_t kResidualWidth = 64;

struct ResidualCache {
  Vec input;
  Vec pre;
  Vec hidden;
};

double residual_delta(std::span<const double> hq, std::span<const double> hk,
                      const ResidualParams& phi, ResidualCache* cache = nullptr);

/// Accumulates parameter gradients; returns dDelta/d[hq ; hk] scaled by
/// grad_out.
Vec residual_backward(double grad_out, const ResidualParams& phi,
                      const ResidualCache& cache, ResidualParams& grads);

/// How a head produces its query code.
enum class EncoderKind : std::uint16_t {
  kAsymmetric = 0,        // MLP for queries, projection for keys
  kSymmetric = 1,         // one projection shared by queries and keys
  kRandomProjection = 2,  // untrained Gaussian projection, shared
};

struct HeadModel {
  EncoderKind kind = EncoderKind::kAsymmetric;
  QueryEncoderParams query;  // unused unless kind == kAsymmetric
  KeyEncoderParams key;
  ResidualParams residual;

  std::size_t input_dim() const noexcept { return key.input_dim(); }
  std::size_t code_bits() const noexcept { return key.code_bits(); }

  BitCode encode_query(std::span<const double> q) const;
  BitCode encode_key(std::span<const double> k) const;

  static HeadModel init(EncoderKind kind, std::size_t d, std::size_t l,
                        std::mt19937_64& rng,
                        std::size_t residual_width = kResidualWidth,
                        double logit_scale = 20.0);

  friend bool operator==(const HeadModel&, const HeadModel&) = default;
};

struct LayerModel {
  std::size_t layer = 0;
  std::vector<HeadModel> heads;
  CalibrationParams calibration;

  friend bool operator==(const LayerModel&, const LayerModel&) = default;
};

/// Append-only per-head KV cache with the packed key codes alongside.
class KvCache {
 public:
  KvCache(std::size_t d, std::size_t l);

  void append(std::span<const double> key, std::span<const double> value,
              const HeadModel& model);

  std::size_t size() const noexcept { return codes_.size(); }
  std::size_t dim() const noexcept { return d_; }
  std::span<const double> key(std::size_t i) const;
  std::span<const double> value(std::size_t i) const;
  const CodeBank& codes() const noexcept { return codes_; }
  /// Keys as an n x d matrix (copy).
  RealMatrix keys() const;

 private:
  std::size_t d_;
  Vec keys_;
  Vec values_;
  CodeBank codes_;
};

/// Build a cache from whole K/V matrices.
KvCache make_kv_cache(const RealMatrix& keys, const RealMatrix& values,
                      const HeadModel& model);

/// S over the first keys.rows() keys. Full/Prior: q.k / sqrt(d).
/// HashResidual: (l - 2 H) / l + Delta(unpack hq, unpack hk). Masked: -inf.
Vec assemble_scores(std::span<const double> q, const RealMatrix& keys,
                    BitCodeView hq, const CodeBank& bank,
                    const TierAssignment& tiers, const ResidualParams& phi,
                    std::size_t d, std::size_t l);

struct AttentionConfig {
  PriorPolicy prior;
  double p1 = 10.0;
  double p2 = 50.0;
};

struct HeadAttention {
  Vec output;            // d
  Vec probs;             // n_keys, masked entries exactly 0
  Vec scores;            // assembled S (before the hash logit scale)
  Vec d_final;           // calibrated distances
  TierAssignment tiers;  // n_keys
};

struct MixedAttentionResult {
  std::vector<HeadAttention> heads;
  /// H x n_keys, ready for update_momentum.
  RealMatrix probs_matrix() const;
};

/// One decode step of one layer: `queries` holds one query per head, each
/// cache holds that head's keys; only the first `n_keys` keys are visible.
/// `prev_attention` is the previous layer's momentum entry (nullptr at
/// layer 0 or when disabled).
MixedAttentionResult mixed_precision_attention(
    std::span<const Vec> queries, std::span<const KvCache> caches,
    std::size_t n_keys, const LayerModel& model, const AttentionConfig& config,
    const Vec* prev_attention);

/// Causal softmax(Q K^T / sqrt(d)) V. Query row r sits at position
/// n_k - n_q + r and sees keys [0, that position].
RealMatrix full_attention_oracle(const RealMatrix& q, const RealMatrix& k,
                                 const RealMatrix& v, std::size_t d);

/// Dense attention probabilities for one query against the first n keys.
Vec full_attention_probs(std::span<const double> q, const RealMatrix& k,
                         std::size_t n_keys, std::size_t d);

}  // namespace dashkv
