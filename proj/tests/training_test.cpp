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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "dashkv/errors.hpp"
#include "dashkv/synthetic.hpp"
#include "dashkv/training.hpp"

namespace dashkv {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

RealMatrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                         double stddev = 1.0) {
  RealMatrix m(r, c);
  fill_normal(m.data(), stddev, rng);
  return m;
}

LossWeights temps(double tau_s, double tau_t) {
  LossWeights w;
  w.tau_student = tau_s;
  w.tau_teacher = tau_t;
  return w;
}

// Both reference values from mpmath at 40 digits.
TEST(DistillLoss, MatchesHighPrecisionKl) {
  const RealMatrix s(2, 3, Vec{0.1, -0.3, 0.2, 0.5, 0.0, -kInf});
  const RealMatrix t(2, 3, Vec{1.0, 0.5, -1.0, 0.2, -0.4, -kInf});
  EXPECT_NEAR(distill_loss(s, t, temps(0.05, 1.0)).loss, 1.1938761328970076919, 1e-12);
  EXPECT_NEAR(distill_loss(s, t, temps(1.0, 1.0)).loss, 0.19782165892007144136, 1e-13);
}

TEST(DistillLoss, ZeroOnlyForMatchingDistributions) {
  std::mt19937_64 rng(1);
  const RealMatrix t = random_matrix(4, 9, rng);
  EXPECT_NEAR(distill_loss(t, t, temps(0.7, 0.7)).loss, 0.0, 1e-12);
  for (int trial = 0; trial < 50; ++trial) {
    const RealMatrix s = random_matrix(4, 9, rng, 3.0);
    EXPECT_GE(distill_loss(s, t, {}).loss, 0.0);
  }
}

TEST(DistillLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (int point = 0; point < 20; ++point) {
    RealMatrix s = random_matrix(3, 6, rng, 0.2);
    RealMatrix t = random_matrix(3, 6, rng);
    t(1, 5) = -kInf;
    s(1, 5) = -kInf;
    s(2, 0) = -kInf;  // student-only mask is allowed
    const LossWeights w = temps(0.05 + 0.1 * (point % 3), 1.0);
    const LossAndGrad lg = distill_loss(s, t, w);
    auto f = [&](std::span<const double> x) {
      RealMatrix probe(3, 6, Vec(x.begin(), x.end()));
      return distill_loss(probe, t, w).loss;
    };
    Vec x(s.data().begin(), s.data().end());
    Vec g(lg.grad.data().begin(), lg.grad.data().end());
    // Finite differences cannot step through -inf entries.
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::isinf(x[i])) continue;
      const double h = 1e-6;
      const double saved = x[i];
      x[i] = saved + h;
      const double up = f(x);
      x[i] = saved - h;
      const double down = f(x);
      x[i] = saved;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(g[i], numeric, 1e-4 * std::max(1.0, std::abs(numeric)));
    }
    EXPECT_EQ(g[11], 0.0);
    EXPECT_EQ(g[12], 0.0);
  }
}

TEST(DistillLoss, Errors) {
  const RealMatrix a(2, 2, Vec{0, 0, 0, 0});
  const RealMatrix masked(2, 2, Vec{0, -kInf, 0, 0});
  EXPECT_THROW(distill_loss(a, RealMatrix(2, 3), {}), DimensionError);
  EXPECT_THROW(distill_loss(a, masked, {}), ContractViolation);
}

TEST(BalanceLoss, Examples) {
  const RealMatrix pair(2, 3, Vec{0.3, -0.8, 0.1, -0.3, 0.8, -0.1});
  EXPECT_NEAR(bit_balance_loss(pair, pair).loss, 0.0, 1e-15);
  const RealMatrix half(3, 4, 0.5);
  const RealMatrix zero_mean(2, 4, Vec{1, 1, 1, 1, -1, -1, -1, -1});
  EXPECT_DOUBLE_EQ(bit_balance_loss(half, zero_mean).loss, 1.0);
  EXPECT_THROW(bit_balance_loss(RealMatrix(0, 4), half), DegenerateInputError);
}

TEST(BalanceLoss, MatchesLoopOracleAndGradient) {
  std::mt19937_64 rng(3);
  for (int point = 0; point < 20; ++point) {
    const RealMatrix hq = random_matrix(5, 4, rng, 0.5);
    const RealMatrix hk = random_matrix(7, 4, rng, 0.5);
    double expect = 0.0;
    for (const RealMatrix* m : {&hq, &hk}) {
      double sq = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < m->rows(); ++r) mean += (*m)(r, c);
        mean /= static_cast<double>(m->rows());
        sq += mean * mean;
      }
      expect += std::sqrt(sq);
    }
    const PairLossAndGrad lg = bit_balance_loss(hq, hk);
    EXPECT_NEAR(lg.loss, expect, 1e-14);
    auto fq = [&](std::span<const double> x) {
      return bit_balance_loss(RealMatrix(5, 4, Vec(x.begin(), x.end())), hk).loss;
    };
    EXPECT_LT(finite_diff_check(fq, hq.data(), lg.grad_q.data()).max_relative_error, 1e-4);
    auto fk = [&](std::span<const double> x) {
      return bit_balance_loss(hq, RealMatrix(7, 4, Vec(x.begin(), x.end()))).loss;
    };
    EXPECT_LT(finite_diff_check(fk, hk.data(), lg.grad_k.data()).max_relative_error, 1e-4);
  }
}

TEST(QuantLoss, Examples) {
  const RealMatrix signs(2, 2, Vec{1, -1, -1, 1});
  EXPECT_EQ(quantization_loss(signs, signs).loss, 0.0);
  EXPECT_EQ(quantization_loss(RealMatrix(3, 4), RealMatrix(2, 4)).loss, 2.0);
  EXPECT_THROW(quantization_loss(RealMatrix(), signs), DegenerateInputError);
}

TEST(QuantLoss, MatchesElementwiseOracleAndGradient) {
  std::mt19937_64 rng(4);
  for (int point = 0; point < 20; ++point) {
    const RealMatrix hq = random_matrix(3, 5, rng, 0.7);
    const RealMatrix hk = random_matrix(6, 5, rng, 0.7);
    double eq = 0.0;
    for (double x : hq.data()) eq += (std::abs(x) - 1) * (std::abs(x) - 1);
    double ek = 0.0;
    for (double x : hk.data()) ek += (std::abs(x) - 1) * (std::abs(x) - 1);
    const PairLossAndGrad lg = quantization_loss(hq, hk);
    EXPECT_NEAR(lg.loss, eq / 15.0 + ek / 30.0, 1e-14);
    auto fq = [&](std::span<const double> x) {
      return quantization_loss(RealMatrix(3, 5, Vec(x.begin(), x.end())), hk).loss;
    };
    EXPECT_LT(finite_diff_check(fq, hq.data(), lg.grad_q.data(), 1e-7).max_relative_error, 1e-4);
    auto fk = [&](std::span<const double> x) {
      return quantization_loss(hq, RealMatrix(6, 5, Vec(x.begin(), x.end()))).loss;
    };
    EXPECT_LT(finite_diff_check(fk, hk.data(), lg.grad_k.data(), 1e-7).max_relative_error, 1e-4);
  }
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_NEAR(total_loss({1.0, 0.5, 0.5}, {}), 1.10, 1e-15);
  LossWeights off;
  off.alpha_balance = 0.0;
  off.beta_quant = 0.0;
  EXPECT_EQ(total_loss({2.5, 9.0, 7.0}, off), 2.5);
  LossWeights w;
  w.alpha_balance = 0.3;
  w.beta_quant = 1.7;
  EXPECT_NEAR(total_loss({0.2, 0.4, 0.8}, w), 0.2 + 0.12 + 1.36, 1e-15);
}

TEST(MseLoss, ExamplesAndGradient) {
  const RealMatrix a(2, 2, Vec{1, 2, 3, 4});
  EXPECT_EQ(mse_residual_loss(a, a).loss, 0.0);
  const RealMatrix b(2, 2, Vec{2, 3, 4, 5});
  EXPECT_EQ(mse_residual_loss(b, a).loss, 1.0);
  const RealMatrix masked(2, 2, Vec{2, -kInf, 4, 5});
  const RealMatrix masked_t(2, 2, Vec{1, -kInf, 3, 4});
  EXPECT_EQ(mse_residual_loss(masked, masked_t).loss, 1.0);
  EXPECT_THROW(mse_residual_loss(a, RealMatrix(1, 2)), DimensionError);

  std::mt19937_64 rng(5);
  const RealMatrix s = random_matrix(3, 3, rng);
  const RealMatrix t = random_matrix(3, 3, rng);
  const LossAndGrad lg = mse_residual_loss(s, t);
  auto f = [&](std::span<const double> x) {
    return mse_residual_loss(RealMatrix(3, 3, Vec(x.begin(), x.end())), t).loss;
  };
  EXPECT_LT(finite_diff_check(f, s.data(), lg.grad.data()).max_relative_error, 1e-6);
}

TEST(Trace, ConsistencyCheckCatchesTampering) {
  std::mt19937_64 rng(6);
  AttentionTrace tr;
  tr.d = 4;
  tr.q = random_matrix(3, 4, rng);
  tr.k = random_matrix(5, 4, rng);
  tr.v = random_matrix(5, 4, rng);
  tr.teacher_logits = AttentionTrace::compute_teacher_logits(tr.q, tr.k, 4);
  EXPECT_NO_THROW(tr.check_consistency());
  // Row 0 sits at position 2 and must not see keys 3 and 4.
  EXPECT_EQ(tr.teacher_logits(0, 3), -kInf);
  EXPECT_NE(tr.teacher_logits(0, 2), -kInf);
  tr.teacher_logits(1, 0) += 1e-3;
  EXPECT_THROW(tr.check_consistency(), ContractViolation);
}

struct LayerFixture {
  std::vector<std::vector<AttentionTrace>> traces;
  RealMatrix prev;
  TrainConfig config;
};

LayerFixture small_layer(EncoderKind kind, ResidualObjective objective,
                         std::uint64_t seed) {
  SyntheticConfig sc;
  sc.seed = seed;
  sc.d = 8;
  sc.n_layers = 2;
  sc.n_heads = 2;
  sc.seq_len = 80;
  LayerFixture f;
  f.traces = generate_traces(sc);
  f.prev = head_mean_attention(f.traces[0]);
  f.config.code_bits = 8;
  f.config.min_prefix = 16;
  f.config.residual_width = 8;
  f.config.encoder = kind;
  f.config.objective = objective;
  return f;
}

TEST(LayerObjective, GradientMatchesFiniteDifferencesAtTwentyPoints) {
  int point = 0;
  for (auto objective : {ResidualObjective::kDistill, ResidualObjective::kMse}) {
    for (auto kind : {EncoderKind::kAsymmetric, EncoderKind::kSymmetric}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed, ++point) {
        LayerFixture f = small_layer(kind, objective, seed);
        f.config.seed = seed;
        LayerModel model = init_layer_model(f.traces[1], f.config);
        std::mt19937_64 rng(seed);
        for (auto& h : model.heads) {
          for (double& w : h.residual.w_out) w = std::normal_distribution<>(0.0, 0.3)(rng);
        }
        model.calibration.beta_spatial = 0.5 + 0.2 * static_cast<double>(seed);
        model.calibration.gamma_temporal = 1.5 - 0.2 * static_cast<double>(seed);
        const std::vector<std::size_t> rows{20, 40 + seed, 79};
        const LayerBatch batch{f.traces[1], rows, &f.prev, 300 * seed};
        LayerGrads grads;
        evaluate_layer_loss(model, batch, f.config, &grads);

        double worst = 0.0;
        auto probe = [&](double& param, double analytic) {
          const double h = 1e-6;
          const double saved = param;
          param = saved + h;
          const double up = evaluate_layer_loss(model, batch, f.config).total;
          param = saved - h;
          const double down = evaluate_layer_loss(model, batch, f.config).total;
          param = saved;
          const double numeric = (up - down) / (2 * h);
          const double scale = std::max({1.0, std::abs(numeric), std::abs(analytic)});
          worst = std::max(worst, std::abs(numeric - analytic) / scale);
        };
        for (std::size_t h = 0; h < model.heads.size(); ++h) {
          HeadModel& m = model.heads[h];
          const HeadModel& g = grads.heads[h];
          for (int i = 0; i < 4; ++i) {
            std::size_t j = rng() % m.key.wk.size();
            probe(m.key.wk.data()[j], g.key.wk.data()[j]);
            j = rng() % m.residual.w_hidden.size();
            probe(m.residual.w_hidden.data()[j], g.residual.w_hidden.data()[j]);
            j = rng() % m.residual.w_out.size();
            probe(m.residual.w_out[j], g.residual.w_out[j]);
            probe(m.residual.b_out[0], g.residual.b_out[0]);
            if (kind == EncoderKind::kAsymmetric) {
              j = rng() % m.query.w1.size();
              probe(m.query.w1.data()[j], g.query.w1.data()[j]);
              j = rng() % m.query.w2.size();
              probe(m.query.w2.data()[j], g.query.w2.data()[j]);
              j = rng() % m.query.w3.size();
              probe(m.query.w3.data()[j], g.query.w3.data()[j]);
              j = rng() % m.query.ln_gain.size();
              probe(m.query.ln_gain[j], g.query.ln_gain[j]);
            }
          }
        }
        probe(model.calibration.beta_spatial, grads.beta_spatial);
        probe(model.calibration.gamma_temporal, grads.gamma_temporal);
        EXPECT_LT(worst, 1e-4) << "point " << point;
      }
    }
  }
  EXPECT_EQ(point, 20);
}

TEST(TrainLayer, ZeroLearningRateLeavesParametersUntouched) {
  LayerFixture f = small_layer(EncoderKind::kAsymmetric, ResidualObjective::kDistill, 1);
  f.config.steps = 5;
  f.config.learning_rate = 0.0;
  const LayerModel init = init_layer_model(f.traces[1], f.config);
  const TrainResult r = train_layer(f.traces[1], f.config, &f.prev);
  EXPECT_EQ(r.model, init);
  ASSERT_EQ(r.curve.size(), 5u);
}

TEST(TrainLayer, DeterministicForFixedSeed) {
  LayerFixture f = small_layer(EncoderKind::kAsymmetric, ResidualObjective::kDistill, 2);
  f.config.steps = 20;
  const TrainResult a = train_layer(f.traces[1], f.config, &f.prev);
  const TrainResult b = train_layer(f.traces[1], f.config, &f.prev);
  EXPECT_EQ(a.model, b.model);
  f.config.seed = 99;
  const TrainResult c = train_layer(f.traces[1], f.config, &f.prev);
  EXPECT_FALSE(a.model == c.model);
}

TEST(TrainLayer, HalvesDistillLossOnSixteenKeyLayer) {
  SyntheticConfig sc;
  sc.seed = 4;
  sc.d = 8;
  sc.n_layers = 1;
  sc.n_heads = 2;
  sc.seq_len = 16;
  const auto traces = generate_traces(sc);
  TrainConfig tc;
  tc.steps = 200;
  tc.min_prefix = 4;
  tc.code_bits = 8;
  const TrainResult r = train_layer(traces[0], tc);

  std::vector<std::size_t> rows(16 - 3);
  std::iota(rows.begin(), rows.end(), std::size_t{3});
  const LayerBatch all{traces[0], rows, nullptr, 200};
  const double before = evaluate_layer_loss(init_layer_model(traces[0], tc), all, tc).components.distill;
  const double after = evaluate_layer_loss(r.model, all, tc).components.distill;
  EXPECT_LE(after, 0.5 * before) << before << " -> " << after;
}

TEST(TrainLayer, CalibrationStrengthsStayNonNegative) {
  LayerFixture f = small_layer(EncoderKind::kSymmetric, ResidualObjective::kDistill, 3);
  f.config.steps = 30;
  f.config.learning_rate = 0.5;
  f.config.calibration.beta_spatial = 0.0;
  f.config.calibration.gamma_temporal = 0.0;
  const TrainResult r = train_layer(f.traces[1], f.config, &f.prev);
  EXPECT_GE(r.model.calibration.beta_spatial, 0.0);
  EXPECT_GE(r.model.calibration.gamma_temporal, 0.0);
}

TEST(TrainLayer, NonFiniteLossReportsStep) {
  LayerFixture f = small_layer(EncoderKind::kSymmetric, ResidualObjective::kDistill, 5);
  f.config.steps = 3;
  LayerModel model = init_layer_model(f.traces[1], f.config);
  model.heads[0].residual.b_out[0] = std::nan("");
  try {
    train_layer_from(model, f.traces[1], f.config, &f.prev);
    FAIL() << "expected TrainingFailure";
  } catch (const TrainingFailure& e) {
    EXPECT_EQ(e.step(), 0u);
  }
}

TEST(TrainLayer, RejectsBadInputs) {
  LayerFixture f = small_layer(EncoderKind::kSymmetric, ResidualObjective::kDistill, 6);
  f.config.min_prefix = 1000;
  EXPECT_THROW(train_layer(f.traces[1], f.config), DegenerateInputError);
  f.config.min_prefix = 16;
  f.config.batch = 0;
  EXPECT_THROW(train_layer(f.traces[1], f.config), ConfigError);
  f.config.batch = 8;
  const std::vector<AttentionTrace> mixed{f.traces[0][0], f.traces[1][1]};
  EXPECT_THROW(train_layer(mixed, f.config), ConfigError);
}

// Mean |relaxed code| and code-mean norm on held-out rows, at a fixed step.
struct CodeStats {
  double mean_abs = 0.0;
  double mean_norm = 0.0;
};

CodeStats code_stats(const LayerModel& model, const AttentionTrace& tr, std::size_t step) {
  const HeadModel& head = model.heads[tr.head];
  const std::size_t l = head.code_bits();
  Vec sum(l, 0.0);
  double abs_sum = 0.0;
  for (std::size_t r = 0; r < tr.n_k(); ++r) {
    const Vec h = key_encode_relaxed(tr.k.row(r), head.key, step);
    for (std::size_t j = 0; j < l; ++j) {
      sum[j] += h[j];
      abs_sum += std::abs(h[j]);
    }
  }
  for (double& s : sum) s /= static_cast<double>(tr.n_k());
  return {abs_sum / static_cast<double>(tr.n_k() * l), l2_norm(sum)};
}

TEST(Regularizers, QuantizationAndBalancePressureAct) {
  SyntheticConfig sc;
  sc.seed = 8;
  sc.d = 16;
  sc.n_layers = 1;
  sc.n_heads = 2;
  sc.seq_len = 256;
  const auto model = make_synthetic_model(sc);
  const auto train = generate_traces(model, 256, 0);
  const auto held_out = generate_traces(model, 256, 1);
  TrainConfig tc;
  tc.steps = 300;
  tc.learning_rate = 3e-2;
  const LayerModel init = init_layer_model(train[0], tc);
  const TrainResult trained = train_layer(train[0], tc);
  TrainConfig no_balance = tc;
  no_balance.weights.alpha_balance = 0.0;
  const TrainResult ablated = train_layer(train[0], no_balance);
  for (const AttentionTrace& tr : held_out[0]) {
    EXPECT_GT(code_stats(trained.model, tr, 0).mean_abs, code_stats(init, tr, 0).mean_abs);
    EXPECT_LT(code_stats(trained.model, tr, 0).mean_norm,
              code_stats(ablated.model, tr, 0).mean_norm);
  }
}

TEST(HeadMeanAttention, AveragesTeacherSoftmaxOverHeads) {
  LayerFixture f = small_layer(EncoderKind::kSymmetric, ResidualObjective::kDistill, 7);
  const RealMatrix m = head_mean_attention(f.traces[0]);
  for (std::size_t r = 0; r < m.rows(); r += 17) {
    const Vec p0 = softmax(f.traces[0][0].teacher_logits.row(r));
    const Vec p1 = softmax(f.traces[0][1].teacher_logits.row(r));
    for (std::size_t i = 0; i < m.cols(); ++i) EXPECT_NEAR(m(r, i), 0.5 * (p0[i] + p1[i]), 1e-15);
  }
}

}  // namespace
}  // namespace dashkv
