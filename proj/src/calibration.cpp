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

#include "dashkv/calibration.hpp"

#include <cmath>
#include <string>

#include "dashkv/errors.hpp"

namespace dashkv {

const Vec* MomentumStore::find(std::size_t layer) const {
  auto it = by_layer_.find(layer);
  return it == by_layer_.end() ? nullptr : &it->second;
}

const Vec* MomentumStore::previous_for(std::size_t layer) const {
  return layer == 0 ? nullptr : find(layer - 1);
}

void MomentumStore::set(std::size_t layer, Vec attention) {
  for (double a : attention) {
    if (!(a >= 0.0 && a <= 1.0)) {
      throw ContractViolation("MomentumStore: attention outside [0, 1]");
    }
  }
  by_layer_[layer] = std::move(attention);
}

double resolve_vote_threshold(const RealMatrix& raw_per_head,
                              const CalibrationParams& params) {
  if (params.vote_mode == VoteThresholdMode::kAbsolute) return params.t_vote;
  return percentile(raw_per_head.data(), params.t_vote);
}

std::vector<std::uint32_t> vote_count(const RealMatrix& raw_per_head,
                                      double t_vote) {
  std::vector<std::uint32_t> votes(raw_per_head.cols(), 0);
  for (std::size_t h = 0; h < raw_per_head.rows(); ++h) {
    auto row = raw_per_head.row(h);
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i] < t_vote) ++votes[i];
    }
  }
  return votes;
}

Vec spatial_correction(std::span<const std::uint32_t> votes,
                       const CalibrationParams& params) {
  if (params.num_heads == 0) throw DomainError("calibration: num_heads = 0");
  const double h = static_cast<double>(params.num_heads);
  Vec out(votes.size());
  for (std::size_t i = 0; i < votes.size(); ++i) {
    if (votes[i] > params.num_heads) {
      throw ContractViolation("spatial_correction: vote exceeds head count");
    }
    out[i] = -params.beta_spatial * static_cast<double>(votes[i]) / h;
  }
  return out;
}

Vec temporal_correction(std::span<const double> prev_attention,
                        const CalibrationParams& params) {
  Vec out(prev_attention.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = -params.gamma_temporal * sigmoid(prev_attention[i]);
  }
  return out;
}

Vec calibrate(std::span<const std::uint32_t> d_raw,
              std::span<const double> delta_spatial,
              std::span<const double> delta_temporal) {
  require_same_length(d_raw.size(), delta_spatial.size(), "calibrate spatial");
  require_same_length(d_raw.size(), delta_temporal.size(), "calibrate temporal");
  Vec out(d_raw.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<double>(d_raw[i]) + delta_spatial[i] + delta_temporal[i];
  }
  return out;
}

MomentumStore update_momentum(MomentumStore store, std::size_t layer,
                              const RealMatrix& attention_probs) {
  const std::size_t heads = attention_probs.rows();
  if (heads == 0) throw DimensionError("update_momentum: no heads");
  Vec mean(attention_probs.cols(), 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    auto row = attention_probs.row(h);
    double sum = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
      sum += row[i];
      mean[i] += row[i];
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw ContractViolation("update_momentum: head " + std::to_string(h) +
                              " probabilities sum to " + std::to_string(sum));
    }
  }
  for (double& m : mean) m /= static_cast<double>(heads);
  store.set(layer, std::move(mean));
  return store;
}

}  // namespace dashkv
