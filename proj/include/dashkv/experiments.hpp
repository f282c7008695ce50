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

// Evaluation drivers: per-variant retrieval quality on recorded traces,
// multi-layer training, and whole-stack replacement experiments on the
// synthetic model.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "dashkv/metrics.hpp"
#include "dashkv/synthetic.hpp"
#include "dashkv/tiered_attention.hpp"
#include "dashkv/training.hpp"

namespace dashkv {

enum class Variant { kNaiveLsh, kSymmetric, kAsymmetric };

const char* variant_name(Variant v);
/// Accepts "naive_lsh", "symmetric", "asymmetric".
std::optional<Variant> parse_variant(std::string_view name);
EncoderKind encoder_kind(Variant v);

struct EvalOptions {
  AttentionConfig attention;
  /// Rows with a shorter causal prefix are skipped.
  std::size_t min_prefix = 64;
  /// Evaluate every row_stride-th eligible row.
  std::size_t row_stride = 1;
  /// 0 selects default_recall_k per row.
  std::size_t k = 0;
  bool measure_latency = false;
};

/// Recall of the D_final ranking against the teacher ranking and KL of the
/// mixed-precision attention to full attention, averaged over evaluated
/// (row, head) pairs. `prev_attention` is the previous layer's head-mean
/// attention (n_q x n_k) or nullptr.
MetricsRecord evaluate_layer(const LayerModel& model,
                             std::span<const AttentionTrace> traces,
                             const RealMatrix* prev_attention,
                             const EvalOptions& options,
                             std::string_view variant);

/// Untrained sign-random-projection model; deterministic in `seed`.
LayerModel naive_layer_model(std::size_t layer, std::size_t n_heads,
                             std::size_t d, std::size_t l, std::uint64_t seed,
                             const CalibrationParams& calibration);

/// The same model with the residual output zeroed (pure hash scores).
LayerModel without_residual(LayerModel model);

/// Train the listed layers of a traces[layer][head] stack. Each layer reads
/// the previous layer's teacher attention as momentum.
std::vector<LayerModel> train_layers(
    const std::vector<std::vector<AttentionTrace>>& traces,
    std::span<const std::size_t> layers, const TrainConfig& config);

enum class LayerMode { kFull, kHashed };

struct StackConfig {
  std::vector<LayerMode> modes;

  static StackConfig all_full(std::size_t n_layers);
  static StackConfig single_layer(std::size_t n_layers, std::size_t layer);
  /// Even layers in [round(n * 10 / 28), round(n * 24 / 28)].
  static StackConfig even_middle(std::size_t n_layers);
  /// First s and last s layers full, the rest hashed.
  static StackConfig sandwich(std::size_t n_layers, std::size_t s = 5);

  std::size_t hashed_count() const;
};

/// Per-head final-layer attention (seq_len x seq_len, zero above the
/// diagonal) after running `tokens` through the stack. `models[l]` is used
/// for every hashed layer l.
std::vector<RealMatrix> run_stack(const SyntheticModel& model,
                                  const RealMatrix& tokens,
                                  const StackConfig& stack,
                                  std::span<const LayerModel> models,
                                  const AttentionConfig& attention);

/// Mean KL(approx || reference) over heads and rows with prefix >= min_prefix.
double attention_distortion(std::span<const RealMatrix> approx,
                            std::span<const RealMatrix> reference,
                            std::size_t min_prefix);

struct SensitivityRow {
  std::optional<std::size_t> replaced_layer;  // empty: replace none
  double distortion = 0.0;
};

constexpr const char* kSensitivityHeader = "replaced_layer,distortion";

/// Replace-none followed by each single-layer replacement.
std::vector<SensitivityRow> layer_sensitivity(const SyntheticModel& model,
                                              const RealMatrix& tokens,
                                              std::span<const LayerModel> models,
                                              const AttentionConfig& attention,
                                              std::size_t min_prefix);

void write_sensitivity_csv(std::ostream& out, std::span<const SensitivityRow> rows);

}  // namespace dashkv
