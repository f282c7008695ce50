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

// Distance calibration: cross-head consensus votes and cross-layer
// momentum, combined into D_final = D_raw + delta_spatial + delta_temporal.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "dashkv/numerics.hpp"

namespace dashkv {

enum class VoteThresholdMode {
  kAbsolute,    // t_vote is a Hamming distance
  kPercentile,  // t_vote is a percentile of the pooled per-head distances
};

enum class MomentumNormalizer { kSigmoid };

struct CalibrationParams {
  double beta_spatial = 1.0;
  double gamma_temporal = 1.0;
  double t_vote = 25.0;
  VoteThresholdMode vote_mode = VoteThresholdMode::kPercentile;
  MomentumNormalizer normalizer = MomentumNormalizer::kSigmoid;
  std::size_t num_heads = 1;

  friend bool operator==(const CalibrationParams&,
                         const CalibrationParams&) = default;
};

/// Previous-layer attention mass per key, head-averaged over the most
/// recent query step. Layer 0 never has an entry.
class MomentumStore {
 public:
  /// nullptr when nothing has been recorded for `layer`.
  const Vec* find(std::size_t layer) const;
  /// What layer `layer` should read: the entry of layer - 1, or nullptr.
  const Vec* previous_for(std::size_t layer) const;
  void set(std::size_t layer, Vec attention);

 private:
  std::map<std::size_t, Vec> by_layer_;
};

/// Threshold in distance units; resolves percentile mode against the
/// pooled raw distances of the current step.
double resolve_vote_threshold(const RealMatrix& raw_per_head,
                              const CalibrationParams& params);

/// votes[i] = #{h : raw_per_head(h, i) < t_vote}.
std::vector<std::uint32_t> vote_count(const RealMatrix& raw_per_head,
                                      double t_vote);

/// -beta_spatial * votes / H
Vec spatial_correction(std::span<const std::uint32_t> votes,
                       const CalibrationParams& params);

/// -gamma_temporal * sigmoid(A)
Vec temporal_correction(std::span<const double> prev_attention,
                        const CalibrationParams& params);

Vec calibrate(std::span<const std::uint32_t> d_raw,
              std::span<const double> delta_spatial,
              std::span<const double> delta_temporal);

/// Store the per-key mean over rows of `attention_probs` (H x N) as the
/// entry for `layer`. Rows must be distributions (sum within 1e-6).
MomentumStore update_momentum(MomentumStore store, std::size_t layer,
                              const RealMatrix& attention_probs);

}  // namespace dashkv
