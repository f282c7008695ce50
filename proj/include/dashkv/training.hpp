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

// Layer-wise distillation of the hash encoders, calibration strengths and
// residual MLP against recorded full-precision attention.
//
// The training objective per sampled (row, head) has two list-wise terms:
//  * retrieval: the relaxed calibrated similarity 1 - 2 D_final / l over
//    every visible key, distilled against the teacher. This is what trains
//    the codes to rank keys and what carries gradients to the calibration
//    strengths.
//  * attention: the tiered student that inference actually computes (exact
//    logits for Prior/Full, hash score + residual for HashResidual, Masked
//    removed), distilled against the teacher, or fit by MSE in the ablation.
// plus alpha * bit balance + beta * quantization on the relaxed codes.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dashkv/numerics.hpp"
#include "dashkv/tiered_attention.hpp"

namespace dashkv {

struct LossWeights {
  double alpha_balance = 0.1;
  double beta_quant = 0.1;
  double tau_teacher = 1.0;
  double tau_student = 0.05;
};

/// One recorded (layer, head) of a teacher pass. Query row r sits at
/// sequence position n_k - n_q + r; teacher_logits are Q K^T / sqrt(d)
/// with -inf above the causal diagonal.
struct AttentionTrace {
  std::uint32_t layer = 0;
  std::uint32_t head = 0;
  std::uint32_t d = 0;
  RealMatrix q;
  RealMatrix k;
  RealMatrix v;
  RealMatrix teacher_logits;

  std::size_t n_q() const noexcept { return q.rows(); }
  std::size_t n_k() const noexcept { return k.rows(); }
  std::size_t position(std::size_t row) const noexcept {
    return n_k() - n_q() + row;
  }

  /// Rebuild teacher_logits from Q and K.
  static RealMatrix compute_teacher_logits(const RealMatrix& q,
                                           const RealMatrix& k, std::size_t d);
  /// Throws ContractViolation if stored logits differ from recomputed ones
  /// by more than `tol` anywhere (including the causal mask pattern).
  void check_consistency(double tol = 1e-5) const;

  friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;
};

struct LossAndGrad {
  double loss = 0.0;
  RealMatrix grad;  // same shape as the student input
};

/// Mean over rows of KL(softmax(student/tau_s) || softmax(teacher/tau_t)).
/// Wherever the teacher is -inf the student must be -inf too; student-only
/// -inf entries are allowed (zero student mass).
LossAndGrad distill_loss(const RealMatrix& student_scores,
                         const RealMatrix& teacher_logits,
                         const LossWeights& weights);

struct PairLossAndGrad {
  double loss = 0.0;
  RealMatrix grad_q;
  RealMatrix grad_k;
};

/// ||mean_rows(hq)|| + ||mean_rows(hk)||
PairLossAndGrad bit_balance_loss(const RealMatrix& hq_relaxed,
                                 const RealMatrix& hk_relaxed);

/// mean((|hq| - 1)^2) + mean((|hk| - 1)^2)
PairLossAndGrad quantization_loss(const RealMatrix& hq_relaxed,
                                  const RealMatrix& hk_relaxed);

struct LossComponents {
  double distill = 0.0;
  double balance = 0.0;
  double quant = 0.0;
};

/// distill + alpha * balance + beta * quant
double total_loss(const LossComponents& c, const LossWeights& weights);

/// Mean squared difference over positions where both inputs are finite.
LossAndGrad mse_residual_loss(const RealMatrix& student_scores,
                              const RealMatrix& teacher_logits);

enum class ResidualObjective { kDistill, kMse };

struct TrainConfig {
  std::size_t steps = 300;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
  std::size_t batch = 8;
  std::size_t train_seq_len = 3000;
  std::size_t eval_seq_len = 32000;
  /// Rows whose causal prefix is shorter than this are never sampled.
  std::size_t min_prefix = 64;
  std::size_t code_bits = 16;
  std::size_t residual_width = kResidualWidth;
  EncoderKind encoder = EncoderKind::kAsymmetric;
  ResidualObjective objective = ResidualObjective::kDistill;
  LossWeights weights;
  AttentionConfig attention;
  CalibrationParams calibration;
};

struct LossRecord {
  std::size_t step = 0;
  double l_distill = 0.0;
  double l_bal = 0.0;
  double l_quant = 0.0;
  double l_total = 0.0;
  double beta_anneal = 1.0;
};

/// Gradient of the layer objective, shaped like the model.
struct LayerGrads {
  std::vector<HeadModel> heads;
  double beta_spatial = 0.0;
  double gamma_temporal = 0.0;
};

struct LayerLoss {
  LossComponents components;
  double total = 0.0;
};

/// Everything the layer objective needs besides the model.
struct LayerBatch {
  /// One trace per head, all from the same layer and sequence.
  std::span<const AttentionTrace> traces;
  /// Query rows to evaluate (indices into the traces' Q).
  std::span<const std::size_t> rows;
  /// Previous layer's head-mean teacher attention (n_q x n_k), or nullptr.
  const RealMatrix* prev_attention = nullptr;
  std::size_t global_step = 0;
};

/// Layer objective at `model`; fills `grads` when non-null.
LayerLoss evaluate_layer_loss(const LayerModel& model, const LayerBatch& batch,
                              const TrainConfig& config,
                              LayerGrads* grads = nullptr);

/// Head-mean softmax of the teacher logits (n_q x n_k); rows are the
/// momentum entries a following layer reads.
RealMatrix head_mean_attention(std::span<const AttentionTrace> layer_traces);

/// Fresh, untrained layer model for the given traces.
LayerModel init_layer_model(std::span<const AttentionTrace> traces,
                            const TrainConfig& config);

struct TrainResult {
  LayerModel model;
  std::vector<LossRecord> curve;
};

/// Plain SGD over sampled query rows with the tanh sharpness annealed by
/// global step. Calibration strengths are projected onto [0, inf) after
/// every update. Throws TrainingFailure on a non-finite loss.
TrainResult train_layer(std::span<const AttentionTrace> traces,
                        const TrainConfig& config,
                        const RealMatrix* prev_attention = nullptr);

/// Same, starting from an existing model instead of a fresh init.
TrainResult train_layer_from(LayerModel model,
                             std::span<const AttentionTrace> traces,
                             const TrainConfig& config,
                             const RealMatrix* prev_attention = nullptr);

}  // namespace dashkv
