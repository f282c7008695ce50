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

#include "dashkv/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "dashkv/errors.hpp"

namespace dashkv {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require_same_shape(const RealMatrix& a, const RealMatrix& b,
                        const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shape mismatch");
  }
}

// KL(softmax(s/tau_s) || softmax(t/tau_t)) for one row. Writes
// dKL/ds * scale into grad when given.
double kl_row(std::span<const double> s, std::span<const double> t,
              double tau_s, double tau_t, std::span<double> grad,
              double scale) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (std::isinf(t[i]) && !std::isinf(s[i])) {
      throw ContractViolation(
          "distill_loss: student has mass where the teacher is masked");
    }
  }
  const Vec log_p = log_softmax(s, tau_s);
  const Vec log_q = log_softmax(t, tau_t);
  double kl = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (std::isinf(log_p[i])) continue;
    kl += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
  }
  if (!grad.empty()) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::isinf(log_p[i])) {
        grad[i] = 0.0;
        continue;
      }
      const double p = std::exp(log_p[i]);
      grad[i] = scale * p / tau_s * (log_p[i] - log_q[i] - kl);
    }
  }
  return kl;
}

double balance_term(const RealMatrix& h, RealMatrix& grad) {
  if (h.rows() == 0) throw DegenerateInputError("bit_balance_loss: empty batch");
  const double n = static_cast<double>(h.rows());
  Vec mean(h.cols(), 0.0);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    for (std::size_t c = 0; c < h.cols(); ++c) mean[c] += h(r, c);
  }
  for (double& m : mean) m /= n;
  const double norm = l2_norm(mean);
  grad = RealMatrix(h.rows(), h.cols());
  if (norm > 0.0) {
    for (std::size_t r = 0; r < h.rows(); ++r) {
      for (std::size_t c = 0; c < h.cols(); ++c) grad(r, c) = mean[c] / (norm * n);
    }
  }
  return norm;
}

double quant_term(const RealMatrix& h, RealMatrix& grad) {
  if (h.empty()) throw DegenerateInputError("quantization_loss: empty batch");
  const double n = static_cast<double>(h.size());
  grad = RealMatrix(h.rows(), h.cols());
  double sum = 0.0;
  auto in = h.data();
  auto out = grad.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double dev = std::abs(in[i]) - 1.0;
    sum += dev * dev;
    out[i] = 2.0 * dev * (in[i] >= 0.0 ? 1.0 : -1.0) / n;
  }
  return sum / n;
}

template <typename Params>
void sgd_step(Params& p, const Params& g, double lr) {
  const Vec flat_g = flatten(g);
  std::size_t offset = 0;
  p.for_each_tensor([&](std::span<double> t) {
    for (double& x : t) x -= lr * flat_g[offset++];
  });
}

// Per (row, head) activations kept between the forward and backward pass.
struct RowHeadState {
  QueryForwardCache query_cache;  // asymmetric heads
  KeyForwardCache query_proj;     // symmetric / random heads
  Vec hq;                         // relaxed query code
  RealMatrix hk;                  // n x l relaxed key codes
  Vec g_hq;
  RealMatrix g_hk;
};

}  // namespace

RealMatrix AttentionTrace::compute_teacher_logits(const RealMatrix& q,
                                                  const RealMatrix& k,
                                                  std::size_t d) {
  require_same_length(q.cols(), d, "teacher logits Q");
  require_same_length(k.cols(), d, "teacher logits K");
  if (q.rows() > k.rows()) throw DimensionError("trace: n_q > n_k");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const std::size_t offset = k.rows() - q.rows();
  RealMatrix logits(q.rows(), k.rows(), kNegInf);
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t i = 0; i <= offset + r; ++i) {
      logits(r, i) = dot(q.row(r), k.row(i)) * inv_sqrt_d;
    }
  }
  return logits;
}

void AttentionTrace::check_consistency(double tol) const {
  const RealMatrix expect = compute_teacher_logits(q, k, d);
  require_same_shape(expect, teacher_logits, "trace teacher logits");
  require_same_shape(k, v, "trace K/V");
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const double a = expect.data()[i];
    const double b = teacher_logits.data()[i];
    const bool ok = (std::isinf(a) || std::isinf(b)) ? a == b
                                                      : std::abs(a - b) <= tol;
    if (!ok) {
      throw ContractViolation("trace (layer " + std::to_string(layer) +
                              ", head " + std::to_string(head) +
                              "): teacher logits inconsistent at entry " +
                              std::to_string(i));
    }
  }
}

LossAndGrad distill_loss(const RealMatrix& student_scores,
                         const RealMatrix& teacher_logits,
                         const LossWeights& weights) {
  require_same_shape(student_scores, teacher_logits, "distill_loss");
  if (student_scores.rows() == 0) throw DegenerateInputError("distill_loss: no rows");
  LossAndGrad out{0.0, RealMatrix(student_scores.rows(), student_scores.cols())};
  const double inv_rows = 1.0 / static_cast<double>(student_scores.rows());
  for (std::size_t r = 0; r < student_scores.rows(); ++r) {
    out.loss += kl_row(student_scores.row(r), teacher_logits.row(r),
                       weights.tau_student, weights.tau_teacher,
                       out.grad.row(r), inv_rows);
  }
  out.loss *= inv_rows;
  return out;
}

PairLossAndGrad bit_balance_loss(const RealMatrix& hq_relaxed,
                                 const RealMatrix& hk_relaxed) {
  PairLossAndGrad out;
  out.loss = balance_term(hq_relaxed, out.grad_q) +
             balance_term(hk_relaxed, out.grad_k);
  return out;
}

PairLossAndGrad quantization_loss(const RealMatrix& hq_relaxed,
                                  const RealMatrix& hk_relaxed) {
  PairLossAndGrad out;
  out.loss =
      quant_term(hq_relaxed, out.grad_q) + quant_term(hk_relaxed, out.grad_k);
  return out;
}

double total_loss(const LossComponents& c, const LossWeights& weights) {
  return c.distill + weights.alpha_balance * c.balance +
         weights.beta_quant * c.quant;
}

LossAndGrad mse_residual_loss(const RealMatrix& student_scores,
                              const RealMatrix& teacher_logits) {
  require_same_shape(student_scores, teacher_logits, "mse_residual_loss");
  LossAndGrad out{0.0, RealMatrix(student_scores.rows(), student_scores.cols())};
  auto s = student_scores.data();
  auto t = teacher_logits.data();
  std::size_t count = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (std::isfinite(s[i]) && std::isfinite(t[i])) ++count;
  }
  if (count == 0) throw DegenerateInputError("mse_residual_loss: nothing unmasked");
  const double inv = 1.0 / static_cast<double>(count);
  auto g = out.grad.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!(std::isfinite(s[i]) && std::isfinite(t[i]))) continue;
    const double diff = s[i] - t[i];
    out.loss += diff * diff * inv;
    g[i] = 2.0 * diff * inv;
  }
  return out;
}

RealMatrix head_mean_attention(std::span<const AttentionTrace> layer_traces) {
  if (layer_traces.empty()) throw DegenerateInputError("head_mean_attention: no heads");
  const auto& first = layer_traces.front();
  RealMatrix mean(first.teacher_logits.rows(), first.teacher_logits.cols());
  for (const auto& trace : layer_traces) {
    require_same_shape(trace.teacher_logits, mean, "head_mean_attention");
    for (std::size_t r = 0; r < mean.rows(); ++r) {
      const Vec p = softmax(trace.teacher_logits.row(r));
      auto row = mean.row(r);
      for (std::size_t i = 0; i < p.size(); ++i) row[i] += p[i];
    }
  }
  for (double& x : mean.data()) x /= static_cast<double>(layer_traces.size());
  return mean;
}

LayerModel init_layer_model(std::span<const AttentionTrace> traces,
                            const TrainConfig& config) {
  if (traces.empty()) throw DegenerateInputError("init_layer_model: no traces");
  const std::size_t layer = traces.front().layer;
  std::seed_seq seq{static_cast<std::uint64_t>(config.seed),
                    static_cast<std::uint64_t>(layer), std::uint64_t{0xD45A}};
  std::mt19937_64 rng(seq);
  LayerModel model;
  model.layer = layer;
  model.calibration = config.calibration;
  model.calibration.num_heads = traces.size();
  const double logit_scale =
      config.weights.tau_teacher / config.weights.tau_student;
  for (const auto& trace : traces) {
    model.heads.push_back(HeadModel::init(config.encoder, trace.d,
                                          config.code_bits, rng,
                                          config.residual_width, logit_scale));
  }
  return model;
}

LayerLoss evaluate_layer_loss(const LayerModel& model, const LayerBatch& batch,
                              const TrainConfig& config, LayerGrads* grads) {
  const std::size_t n_heads = model.heads.size();
  require_same_length(batch.traces.size(), n_heads, "layer loss traces");
  if (batch.rows.empty()) throw DegenerateInputError("layer loss: no rows");
  const std::size_t l = model.heads.front().code_bits();
  const double inv_l = 1.0 / static_cast<double>(l);
  const LossWeights& w = config.weights;
  const double beta = beta_schedule(batch.global_step);
  const std::size_t n_rows = batch.rows.size();
  const double pair_scale = 1.0 / static_cast<double>(n_rows * n_heads);
  const bool want = grads != nullptr;

  if (want) {
    grads->heads.clear();
    for (const auto& head : model.heads) {
      HeadModel g;
      g.kind = head.kind;
      if (head.kind == EncoderKind::kAsymmetric) {
        g.query = QueryEncoderParams::zeros_like(head.query);
      }
      g.key = KeyEncoderParams::zeros_like(head.key);
      g.residual = ResidualParams::zeros_like(head.residual);
      grads->heads.push_back(std::move(g));
    }
    grads->beta_spatial = 0.0;
    grads->gamma_temporal = 0.0;
  }

  CalibrationParams calib = model.calibration;
  calib.num_heads = n_heads;

  // state[row][head]
  std::vector<std::vector<RowHeadState>> state(n_rows,
                                               std::vector<RowHeadState>(n_heads));
  double distill_sum = 0.0;

  for (std::size_t ri = 0; ri < n_rows; ++ri) {
    const std::size_t row = batch.rows[ri];
    const std::size_t pos = batch.traces.front().position(row);
    const std::size_t n = pos + 1;

    RealMatrix raw(n_heads, n);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const AttentionTrace& tr = batch.traces[h];
      const HeadModel& head = model.heads[h];
      RowHeadState& st = state[ri][h];
      const auto q = tr.q.row(row);

      const Vec* vq = nullptr;
      if (head.kind == EncoderKind::kAsymmetric) {
        st.hq = query_encode_relaxed(q, head.query, batch.global_step,
                                     &st.query_cache);
        vq = &st.query_cache.v;
      } else {
        st.hq = key_encode_relaxed(q, head.key, batch.global_step, &st.query_proj);
        vq = &st.query_proj.z;
      }

      st.hk = RealMatrix(n, l);
      for (std::size_t i = 0; i < n; ++i) {
        const Vec z = vec_mat(tr.k.row(i), head.key.wk);
        auto out = st.hk.row(i);
        std::uint32_t diff = 0;
        for (std::size_t j = 0; j < l; ++j) {
          out[j] = std::tanh(beta * z[j]);
          diff += ((*vq)[j] >= 0.0) != (z[j] >= 0.0);
        }
        raw(h, i) = diff;
      }
      st.g_hq.assign(l, 0.0);
      st.g_hk = RealMatrix(n, l);
    }

    const double t_vote = resolve_vote_threshold(raw, calib);
    const auto votes = vote_count(raw, t_vote);
    const Vec spatial = spatial_correction(votes, calib);
    Vec temporal(n, 0.0);
    Vec sig_prev;
    if (batch.prev_attention != nullptr) {
      const auto prev = batch.prev_attention->row(row).first(n);
      temporal = temporal_correction(prev, calib);
      sig_prev.resize(n);
      for (std::size_t i = 0; i < n; ++i) sig_prev[i] = sigmoid(prev[i]);
    }
    const auto prior = build_prior_set(n, config.attention.prior);

    for (std::size_t h = 0; h < n_heads; ++h) {
      const AttentionTrace& tr = batch.traces[h];
      const HeadModel& head = model.heads[h];
      RowHeadState& st = state[ri][h];
      const auto teacher = tr.teacher_logits.row(row).first(n);

      // Retrieval term over every visible key.
      Vec retrieval(n);
      for (std::size_t i = 0; i < n; ++i) {
        retrieval[i] = dot(st.hq, st.hk.row(i)) * inv_l -
                       2.0 * inv_l * (spatial[i] + temporal[i]);
      }
      Vec g_ret(want ? n : 0);
      distill_sum += kl_row(retrieval, teacher, w.tau_student, w.tau_teacher,
                            g_ret, pair_scale);
      if (want) {
        for (std::size_t i = 0; i < n; ++i) {
          const double g = g_ret[i];
          if (g == 0.0) continue;
          auto hk = st.hk.row(i);
          auto ghk = st.g_hk.row(i);
          for (std::size_t j = 0; j < l; ++j) {
            st.g_hq[j] += g * hk[j] * inv_l;
            ghk[j] += g * st.hq[j] * inv_l;
          }
          grads->beta_spatial += g * 2.0 * inv_l *
                                 static_cast<double>(votes[i]) /
                                 static_cast<double>(n_heads);
          if (!sig_prev.empty()) grads->gamma_temporal += g * 2.0 * inv_l * sig_prev[i];
        }
      }

      // Tiered attention term.
      std::vector<std::uint32_t> d_raw(n);
      for (std::size_t i = 0; i < n; ++i) {
        d_raw[i] = static_cast<std::uint32_t>(raw(h, i));
      }
      const Vec d_final = calibrate(d_raw, spatial, temporal);
      Vec candidates;
      candidates.reserve(n);
      for (std::size_t i = 0, p = 0; i < n; ++i) {
        if (p < prior.size() && prior[p] == i) {
          ++p;
          continue;
        }
        candidates.push_back(d_final[i]);
      }
      Thresholds t{kNegInf, kNegInf};
      if (!candidates.empty()) {
        t = compute_thresholds(candidates, config.attention.p1, config.attention.p2);
      }
      const TierAssignment tiers = assign_tiers(d_final, t.t1, t.t2, prior);

      const double to_student = w.tau_student / w.tau_teacher;
      Vec student(n);
      std::vector<std::size_t> hash_keys;
      std::vector<ResidualCache> residual_caches;
      for (std::size_t i = 0; i < n; ++i) {
        switch (tiers[i]) {
          case Tier::kPrior:
          case Tier::kFull:
            student[i] = teacher[i] * to_student;
            break;
          case Tier::kHashResidual: {
            ResidualCache rc;
            const double delta =
                residual_delta(st.hq, st.hk.row(i), head.residual, &rc);
            student[i] = dot(st.hq, st.hk.row(i)) * inv_l + delta;
            hash_keys.push_back(i);
            residual_caches.push_back(std::move(rc));
            break;
          }
          case Tier::kMasked:
            student[i] = kNegInf;
            break;
        }
      }

      Vec g_student(n, 0.0);
      if (config.objective == ResidualObjective::kDistill) {
        distill_sum += kl_row(student, teacher, w.tau_student, w.tau_teacher,
                              want ? std::span<double>(g_student)
                                   : std::span<double>(),
                              pair_scale);
      } else {
        // Fit hash-tier scores to teacher logits rescaled into student
        // units; exact tiers contribute zero error but count as unmasked.
        std::size_t unmasked = 0;
        for (std::size_t i = 0; i < n; ++i) unmasked += tiers[i] != Tier::kMasked;
        double mse = 0.0;
        for (std::size_t i : hash_keys) {
          const double diff = student[i] - teacher[i] * to_student;
          mse += diff * diff;
          g_student[i] = pair_scale * 2.0 * diff / static_cast<double>(unmasked);
        }
        distill_sum += mse / static_cast<double>(unmasked);
      }

      if (want) {
        HeadModel& gh = grads->heads[h];
        for (std::size_t idx = 0; idx < hash_keys.size(); ++idx) {
          const std::size_t i = hash_keys[idx];
          const double g = g_student[i];
          if (g == 0.0) continue;
          const Vec g_in = residual_backward(g, head.residual,
                                             residual_caches[idx], gh.residual);
          auto hk = st.hk.row(i);
          auto ghk = st.g_hk.row(i);
          for (std::size_t j = 0; j < l; ++j) {
            st.g_hq[j] += g * hk[j] * inv_l + g_in[j];
            ghk[j] += g * st.hq[j] * inv_l + g_in[l + j];
          }
        }
      }
    }
  }

  // Code regularizers, one batch per head: every sampled query and every
  // visible key of every sampled row.
  double balance_sum = 0.0;
  double quant_sum = 0.0;
  const double head_scale = 1.0 / static_cast<double>(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    std::size_t total_keys = 0;
    for (std::size_t ri = 0; ri < n_rows; ++ri) total_keys += state[ri][h].hk.rows();
    RealMatrix hq_batch(n_rows, l);
    RealMatrix hk_batch(total_keys, l);
    for (std::size_t ri = 0, off = 0; ri < n_rows; ++ri) {
      const RowHeadState& st = state[ri][h];
      std::copy(st.hq.begin(), st.hq.end(), hq_batch.row(ri).begin());
      std::copy(st.hk.data().begin(), st.hk.data().end(),
                hk_batch.data().begin() + static_cast<std::ptrdiff_t>(off * l));
      off += st.hk.rows();
    }
    const PairLossAndGrad bal = bit_balance_loss(hq_batch, hk_batch);
    const PairLossAndGrad quant = quantization_loss(hq_batch, hk_batch);
    balance_sum += bal.loss;
    quant_sum += quant.loss;
    if (!want) continue;
    const double a = w.alpha_balance * head_scale;
    const double b = w.beta_quant * head_scale;
    for (std::size_t ri = 0, off = 0; ri < n_rows; ++ri) {
      RowHeadState& st = state[ri][h];
      for (std::size_t j = 0; j < l; ++j) {
        st.g_hq[j] += a * bal.grad_q(ri, j) + b * quant.grad_q(ri, j);
      }
      for (std::size_t i = 0; i < st.hk.rows(); ++i) {
        auto ghk = st.g_hk.row(i);
        for (std::size_t j = 0; j < l; ++j) {
          ghk[j] += a * bal.grad_k(off + i, j) + b * quant.grad_k(off + i, j);
        }
      }
      off += st.hk.rows();
    }
  }

  if (want) {
    // Back through the encoders.
    for (std::size_t ri = 0; ri < n_rows; ++ri) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        RowHeadState& st = state[ri][h];
        const HeadModel& head = model.heads[h];
        HeadModel& gh = grads->heads[h];
        if (head.kind == EncoderKind::kAsymmetric) {
          query_encode_backward(st.g_hq, head.query, st.query_cache, gh.query);
        } else {
          key_encode_backward(st.g_hq, head.key, st.query_proj, gh.key);
        }
        const AttentionTrace& tr = batch.traces[h];
        Vec g_z(l);
        for (std::size_t i = 0; i < st.hk.rows(); ++i) {
          auto hk = st.hk.row(i);
          auto ghk = st.g_hk.row(i);
          bool any = false;
          for (std::size_t j = 0; j < l; ++j) {
            g_z[j] = ghk[j] * beta * (1.0 - hk[j] * hk[j]);
            any = any || g_z[j] != 0.0;
          }
          if (any) add_outer(gh.key.wk, tr.k.row(i), g_z);
        }
      }
    }
  }

  LayerLoss out;
  out.components.distill = distill_sum * pair_scale;
  out.components.balance = balance_sum * head_scale;
  out.components.quant = quant_sum * head_scale;
  out.total = total_loss(out.components, w);
  return out;
}

TrainResult train_layer(std::span<const AttentionTrace> traces,
                        const TrainConfig& config,
                        const RealMatrix* prev_attention) {
  return train_layer_from(init_layer_model(traces, config), traces, config,
                          prev_attention);
}

TrainResult train_layer_from(LayerModel model,
                             std::span<const AttentionTrace> traces,
                             const TrainConfig& config,
                             const RealMatrix* prev_attention) {
  require_same_length(traces.size(), model.heads.size(), "train_layer heads");
  for (const auto& tr : traces) {
    if (tr.layer != traces.front().layer) {
      throw ConfigError("train_layer: traces span more than one layer");
    }
    if (tr.n_q() != traces.front().n_q() || tr.n_k() != traces.front().n_k()) {
      throw DimensionError("train_layer: heads disagree on trace shape");
    }
  }
  if (config.batch == 0) throw ConfigError("train_layer: batch must be >= 1");

  std::vector<std::size_t> eligible;
  const AttentionTrace& ref = traces.front();
  for (std::size_t r = 0; r < ref.n_q(); ++r) {
    const std::size_t pos = ref.position(r);
    if (pos + 1 >= config.min_prefix && pos < config.train_seq_len) {
      eligible.push_back(r);
    }
  }
  if (eligible.empty()) {
    throw DegenerateInputError("train_layer: no query rows with a long enough prefix");
  }

  std::seed_seq seq{static_cast<std::uint64_t>(config.seed),
                    static_cast<std::uint64_t>(model.layer),
                    std::uint64_t{0x5A3B1E}};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);

  TrainResult result;
  result.curve.reserve(config.steps);
  std::vector<std::size_t> rows(config.batch);
  LayerGrads grads;
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (auto& r : rows) r = eligible[pick(rng)];
    const LayerBatch batch{traces, rows, prev_attention, step};
    LayerLoss loss;
    try {
      loss = evaluate_layer_loss(model, batch, config, &grads);
    } catch (const DomainError& e) {
      // NaN parameters surface here before any loss exists.
      throw TrainingFailure(std::string("train_layer: ") + e.what(), step);
    }
    if (!std::isfinite(loss.total)) {
      throw TrainingFailure("train_layer: non-finite loss", step);
    }
    result.curve.push_back({step, loss.components.distill,
                            loss.components.balance, loss.components.quant,
                            loss.total, beta_schedule(step)});
    if (config.learning_rate == 0.0) continue;

    const double lr = config.learning_rate;
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
      HeadModel& head = model.heads[h];
      const HeadModel& g = grads.heads[h];
      if (head.kind == EncoderKind::kAsymmetric) sgd_step(head.query, g.query, lr);
      sgd_step(head.key, g.key, lr);
      sgd_step(head.residual, g.residual, lr);
    }
    auto& calib = model.calibration;
    calib.beta_spatial = std::max(0.0, calib.beta_spatial - lr * grads.beta_spatial);
    calib.gamma_temporal =
        std::max(0.0, calib.gamma_temporal - lr * grads.gamma_temporal);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace dashkv
