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

#include "dashkv/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "dashkv/errors.hpp"

namespace dashkv {

namespace {

std::vector<KvCache> build_caches(const LayerModel& model,
                                  std::span<const AttentionTrace> traces) {
  std::vector<KvCache> caches;
  caches.reserve(traces.size());
  for (std::size_t h = 0; h < traces.size(); ++h) {
    caches.push_back(make_kv_cache(traces[h].k, traces[h].v, model.heads[h]));
  }
  return caches;
}

void check_layer_model(const LayerModel& model, std::size_t n_heads,
                       std::size_t d, std::size_t layer) {
  if (model.heads.empty()) {
    throw ConfigError("missing checkpoint for layer " + std::to_string(layer));
  }
  if (model.heads.size() != n_heads) {
    throw ConfigError("layer " + std::to_string(layer) + " model has " +
                      std::to_string(model.heads.size()) + " heads, traces have " +
                      std::to_string(n_heads));
  }
  if (model.heads.front().input_dim() != d) {
    throw ConfigError("layer " + std::to_string(layer) +
                      " model input dimension does not match the traces");
  }
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kNaiveLsh:
      return "naive_lsh";
    case Variant::kSymmetric:
      return "symmetric";
    case Variant::kAsymmetric:
      return "asymmetric";
  }
  return "unknown";
}

std::optional<Variant> parse_variant(std::string_view name) {
  for (Variant v : {Variant::kNaiveLsh, Variant::kSymmetric, Variant::kAsymmetric}) {
    if (name == variant_name(v)) return v;
  }
  return std::nullopt;
}

EncoderKind encoder_kind(Variant v) {
  switch (v) {
    case Variant::kNaiveLsh:
      return EncoderKind::kRandomProjection;
    case Variant::kSymmetric:
      return EncoderKind::kSymmetric;
    case Variant::kAsymmetric:
      return EncoderKind::kAsymmetric;
  }
  return EncoderKind::kAsymmetric;
}

MetricsRecord evaluate_layer(const LayerModel& model,
                             std::span<const AttentionTrace> traces,
                             const RealMatrix* prev_attention,
                             const EvalOptions& options,
                             std::string_view variant) {
  if (traces.empty()) throw DegenerateInputError("evaluate_layer: no traces");
  const AttentionTrace& ref = traces.front();
  check_layer_model(model, traces.size(), ref.d, ref.layer);
  if (options.row_stride == 0) throw ConfigError("evaluate_layer: row_stride = 0");

  const std::vector<KvCache> caches = build_caches(model, traces);
  MetricsRecord rec;
  rec.variant = std::string(variant);
  rec.layer = ref.layer;
  rec.seq_len = ref.n_k();

  double recall_sum = 0.0;
  double kl_sum = 0.0;
  double seconds = 0.0;
  std::size_t pairs = 0;
  std::size_t rows = 0;
  std::size_t k_used = 0;
  std::vector<Vec> queries(traces.size());
  Vec prev_row;
  std::size_t seen = 0;
  for (std::size_t r = 0; r < ref.n_q(); ++r) {
    const std::size_t n = ref.position(r) + 1;
    if (n < options.min_prefix) continue;
    if (seen++ % options.row_stride != 0) continue;
    for (std::size_t h = 0; h < traces.size(); ++h) {
      const auto q = traces[h].q.row(r);
      queries[h].assign(q.begin(), q.end());
    }
    const Vec* prev = nullptr;
    if (prev_attention != nullptr) {
      const auto row = prev_attention->row(r);
      prev_row.assign(row.begin(), row.end());
      prev = &prev_row;
    }
    const auto start = std::chrono::steady_clock::now();
    const MixedAttentionResult res = mixed_precision_attention(
        queries, caches, n, model, options.attention, prev);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                   .count();
    ++rows;

    const std::size_t k = options.k == 0 ? default_recall_k(n) : std::min(options.k, n);
    k_used = std::max(k_used, k);
    for (std::size_t h = 0; h < traces.size(); ++h) {
      const auto teacher = traces[h].teacher_logits.row(r).first(n);
      const Vec full = softmax(teacher);
      kl_sum += kl_divergence_metric(res.heads[h].probs, full);
      recall_sum += recall_at_k(rank_ascending(res.heads[h].d_final),
                                rank_descending(teacher), k);
      ++pairs;
    }
  }
  if (pairs == 0) {
    throw DegenerateInputError("evaluate_layer: no rows with prefix >= " +
                               std::to_string(options.min_prefix));
  }
  rec.k = options.k == 0 ? k_used : options.k;
  rec.recall_at_k = recall_sum / static_cast<double>(pairs);
  rec.kl_to_full = kl_sum / static_cast<double>(pairs);
  if (options.measure_latency) {
    rec.mean_latency_per_token_us = 1e6 * seconds / static_cast<double>(rows);
  }
  return rec;
}

LayerModel naive_layer_model(std::size_t layer, std::size_t n_heads,
                             std::size_t d, std::size_t l, std::uint64_t seed,
                             const CalibrationParams& calibration) {
  std::seed_seq seq{seed, static_cast<std::uint64_t>(layer), std::uint64_t{0x15A}};
  std::mt19937_64 rng(seq);
  LayerModel m;
  m.layer = layer;
  m.calibration = calibration;
  m.calibration.num_heads = n_heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    m.heads.push_back(HeadModel::init(EncoderKind::kRandomProjection, d, l, rng));
  }
  return without_residual(std::move(m));
}

LayerModel without_residual(LayerModel model) {
  for (auto& head : model.heads) {
    std::fill(head.residual.w_out.begin(), head.residual.w_out.end(), 0.0);
    std::fill(head.residual.b_out.begin(), head.residual.b_out.end(), 0.0);
  }
  return model;
}

std::vector<LayerModel> train_layers(
    const std::vector<std::vector<AttentionTrace>>& traces,
    std::span<const std::size_t> layers, const TrainConfig& config) {
  std::vector<LayerModel> out;
  for (std::size_t layer : layers) {
    if (layer >= traces.size()) {
      throw ConfigError("train_layers: no traces for layer " + std::to_string(layer));
    }
    std::optional<RealMatrix> prev;
    if (layer > 0) prev = head_mean_attention(traces[layer - 1]);
    out.push_back(
        train_layer(traces[layer], config, prev ? &*prev : nullptr).model);
  }
  return out;
}

StackConfig StackConfig::all_full(std::size_t n_layers) {
  return StackConfig{std::vector<LayerMode>(n_layers, LayerMode::kFull)};
}

StackConfig StackConfig::single_layer(std::size_t n_layers, std::size_t layer) {
  if (layer >= n_layers) throw ConfigError("single_layer: layer out of range");
  StackConfig s = all_full(n_layers);
  s.modes[layer] = LayerMode::kHashed;
  return s;
}

StackConfig StackConfig::even_middle(std::size_t n_layers) {
  StackConfig s = all_full(n_layers);
  const double n = static_cast<double>(n_layers);
  const auto lo = static_cast<std::size_t>(std::lround(n * 10.0 / 28.0));
  const auto hi = static_cast<std::size_t>(std::lround(n * 24.0 / 28.0));
  for (std::size_t l = lo; l <= hi && l < n_layers; ++l) {
    if (l % 2 == 0) s.modes[l] = LayerMode::kHashed;
  }
  return s;
}

StackConfig StackConfig::sandwich(std::size_t n_layers, std::size_t s) {
  StackConfig out = all_full(n_layers);
  for (std::size_t l = s; l + s < n_layers; ++l) out.modes[l] = LayerMode::kHashed;
  return out;
}

std::size_t StackConfig::hashed_count() const {
  return static_cast<std::size_t>(
      std::count(modes.begin(), modes.end(), LayerMode::kHashed));
}

std::vector<RealMatrix> run_stack(const SyntheticModel& model,
                                  const RealMatrix& tokens,
                                  const StackConfig& stack,
                                  std::span<const LayerModel> models,
                                  const AttentionConfig& attention) {
  const SyntheticConfig& c = model.config;
  if (stack.modes.size() != c.n_layers) {
    throw ConfigError("run_stack: stack has " + std::to_string(stack.modes.size()) +
                      " layers, model has " + std::to_string(c.n_layers));
  }
  const std::size_t n = tokens.rows();
  RealMatrix x = tokens;
  RealMatrix momentum;  // head-mean attention of the previous layer
  std::vector<RealMatrix> probs;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    std::vector<HeadProjections> proj;
    for (const auto& head : model.layers[l]) proj.push_back(project_head(model, head, x));
    probs.assign(c.n_heads, RealMatrix(n, n));
    std::vector<RealMatrix> outputs(c.n_heads, RealMatrix(n, c.d));

    if (stack.modes[l] == LayerMode::kFull) {
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c.d));
      Vec logits;
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        for (std::size_t t = 0; t < n; ++t) {
          logits.resize(t + 1);
          for (std::size_t i = 0; i <= t; ++i) {
            logits[i] = dot(proj[h].q.row(t), proj[h].k.row(i)) * inv_sqrt_d;
          }
          const Vec p = softmax(logits);
          std::copy(p.begin(), p.end(), probs[h].row(t).begin());
          auto o = outputs[h].row(t);
          for (std::size_t i = 0; i <= t; ++i) {
            auto vi = proj[h].v.row(i);
            for (std::size_t j = 0; j < c.d; ++j) o[j] += p[i] * vi[j];
          }
        }
      }
    } else {
      if (l >= models.size()) {
        throw ConfigError("missing checkpoint for layer " + std::to_string(l));
      }
      const LayerModel& lm = models[l];
      check_layer_model(lm, c.n_heads, c.d, l);
      std::vector<KvCache> caches;
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        caches.push_back(make_kv_cache(proj[h].k, proj[h].v, lm.heads[h]));
      }
      std::vector<Vec> queries(c.n_heads);
      Vec prev_row;
      for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
          const auto q = proj[h].q.row(t);
          queries[h].assign(q.begin(), q.end());
        }
        const Vec* prev = nullptr;
        if (l > 0) {
          const auto row = momentum.row(t);
          prev_row.assign(row.begin(), row.end());
          prev = &prev_row;
        }
        const MixedAttentionResult res =
            mixed_precision_attention(queries, caches, t + 1, lm, attention, prev);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
          const auto& ha = res.heads[h];
          std::copy(ha.probs.begin(), ha.probs.end(), probs[h].row(t).begin());
          std::copy(ha.output.begin(), ha.output.end(), outputs[h].row(t).begin());
        }
      }
    }

    momentum = RealMatrix(n, n);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      auto src = probs[h].data();
      auto dst = momentum.data();
      for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i] / static_cast<double>(c.n_heads);
      }
    }
    if (l + 1 < c.n_layers) residual_update(model, l, outputs, x);
  }
  return probs;
}

double attention_distortion(std::span<const RealMatrix> approx,
                            std::span<const RealMatrix> reference,
                            std::size_t min_prefix) {
  require_same_length(approx.size(), reference.size(), "attention_distortion heads");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t h = 0; h < approx.size(); ++h) {
    require_same_length(approx[h].rows(), reference[h].rows(), "distortion rows");
    for (std::size_t t = 0; t < approx[h].rows(); ++t) {
      const std::size_t n = t + 1;
      if (n < min_prefix) continue;
      sum += kl_divergence_metric(approx[h].row(t).first(n),
                                  reference[h].row(t).first(n));
      ++count;
    }
  }
  if (count == 0) throw DegenerateInputError("attention_distortion: no rows");
  return sum / static_cast<double>(count);
}

std::vector<SensitivityRow> layer_sensitivity(const SyntheticModel& model,
                                              const RealMatrix& tokens,
                                              std::span<const LayerModel> models,
                                              const AttentionConfig& attention,
                                              std::size_t min_prefix) {
  const std::size_t n_layers = model.config.n_layers;
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (l >= models.size() || models[l].heads.empty()) {
      throw ConfigError("missing checkpoint for layer " + std::to_string(l));
    }
  }
  const auto reference =
      run_stack(model, tokens, StackConfig::all_full(n_layers), models, attention);
  std::vector<SensitivityRow> rows;
  rows.push_back({std::nullopt, attention_distortion(reference, reference, min_prefix)});
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto approx = run_stack(model, tokens, StackConfig::single_layer(n_layers, l),
                                  models, attention);
    rows.push_back({l, attention_distortion(approx, reference, min_prefix)});
  }
  return rows;
}

void write_sensitivity_csv(std::ostream& out, std::span<const SensitivityRow> rows) {
  out << kSensitivityHeader << '\n';
  char buf[40];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.distortion);
    out << (r.replaced_layer ? std::to_string(*r.replaced_layer) : std::string("none"))
        << ',' << buf << '\n';
  }
}

}  // namespace dashkv
