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
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dashkv/numerics.hpp"
#include "dashkv/training.hpp"

namespace dashkv {

/// Smoothing mass added to every entry before the KL metric.
constexpr double kKlSmoothing = 1e-10;

/// |top_k(approx) intersect top_k(true)| / k. Both rankings must be
/// permutations of the same index set.
double recall_at_k(std::span<const std::size_t> approx_ranking,
                   std::span<const std::size_t> true_ranking, std::size_t k);

/// max(10, 1% of n) capped at n below 10,000 keys; 100 from there on.
std::size_t default_recall_k(std::size_t n_keys);

/// Indices ordered by ascending value; ties broken by ascending index.
std::vector<std::size_t> rank_ascending(std::span<const double> values);
/// Indices ordered by descending value; ties broken by ascending index.
std::vector<std::size_t> rank_descending(std::span<const double> values);

/// sum p log(p / q) after adding kKlSmoothing to both and renormalizing.
double kl_divergence_metric(std::span<const double> p_approx,
                            std::span<const double> p_full);

struct MetricsRecord {
  std::string variant;
  std::size_t layer = 0;
  std::size_t seq_len = 0;
  std::size_t k = 0;
  double recall_at_k = 0.0;
  double kl_to_full = 0.0;
  /// Microseconds; empty when timing was not requested.
  std::optional<double> mean_latency_per_token_us;
};

constexpr const char* kMetricsHeader =
    "variant,layer,seq_len,k,recall_at_k,kl_to_full,mean_latency_per_token_us";
constexpr const char* kLossCurveHeader =
    "step,l_distill,l_bal,l_quant,l_total,beta_anneal";

/// Reals are written with 17 significant digits so files round-trip.
void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records);
void write_loss_curve_csv(std::ostream& out, std::span<const LossRecord> curve);

/// Minimal CSV reader for the files above: header row plus numeric or
/// bare-word cells, no quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
CsvTable parse_csv(std::istream& in);

}  // namespace dashkv
