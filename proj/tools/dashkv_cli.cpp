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

// dashkv command line: gen | train | eval | bench | sensitivity.
// Exit status 0 on success, 1 on configuration errors, 2 on runtime failures.

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "dashkv/bench.hpp"
#include "dashkv/errors.hpp"
#include "dashkv/experiments.hpp"
#include "dashkv/formats.hpp"
#include "dashkv/metrics.hpp"
#include "dashkv/synthetic.hpp"
#include "dashkv/training.hpp"

namespace fs = std::filesystem;
using namespace dashkv;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

std::size_t worker_cap() {
  const char* env = std::getenv("DASHKV_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (end == env || *end != '\0' || v == 0) {
    throw ConfigError("DASHKV_THREADS must be a positive integer");
  }
  return v;
}

// Runs job(i) for i in [0, n) on up to DASHKV_THREADS threads. Jobs are
// independent, so results do not depend on the thread count.
template <typename F>
void fan_out(std::size_t n, F&& job) {
  const std::size_t threads = std::min(worker_cap(), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::ofstream open_text(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

void add_synthetic_flags(CLI::App* cmd, SyntheticConfig& c) {
  cmd->add_option("--layers", c.n_layers, "number of layers")->capture_default_str();
  cmd->add_option("--heads", c.n_heads, "heads per layer")->capture_default_str();
  cmd->add_option("--d", c.d, "head dimension")->capture_default_str();
  cmd->add_option("--seq-len", c.seq_len, "tokens per sequence")->capture_default_str();
  cmd->add_option("--clusters", c.n_clusters, "token clusters")->capture_default_str();
  cmd->add_option("--spread", c.cluster_spread, "cluster spread")->capture_default_str();
  cmd->add_option("--sink-boost", c.sink_boost, "sink logit bonus")->capture_default_str();
  cmd->add_option("--sink-tokens", c.n_sink_tokens, "sink token count")->capture_default_str();
  cmd->add_option("--layer-drift", c.layer_drift, "per-layer rotation")->capture_default_str();
  cmd->add_option("--anisotropy", c.anisotropy, "Q/K anisotropy")->capture_default_str();
  cmd->add_option("--sharpness", c.sharpness, "mid-stack sharpness")->capture_default_str();
  cmd->add_option("--edge-focus", c.edge_focus, "extra sharpness at the ends")
      ->capture_default_str();
  cmd->add_option("--residual-gain", c.residual_gain, "stream update gain")
      ->capture_default_str();
  cmd->add_option("--stream", c.stream, "token stream index")->capture_default_str();
}

void add_attention_flags(CLI::App* cmd, AttentionConfig& a) {
  cmd->add_option("--p1", a.p1, "full-precision tier percentile")->capture_default_str();
  cmd->add_option("--p2", a.p2, "hash tier upper percentile")->capture_default_str();
  cmd->add_option("--sink", a.prior.n_sink, "always-kept leading tokens")
      ->capture_default_str();
  cmd->add_option("--local", a.prior.n_local, "always-kept trailing tokens")
      ->capture_default_str();
}

std::vector<std::size_t> resolve_layers(const std::vector<std::size_t>& requested,
                                        const fs::path& traces) {
  const auto available = list_trace_layers(traces);
  if (available.empty()) throw ConfigError("no trace files in " + traces.string());
  if (requested.empty()) return available;
  for (std::size_t l : requested) {
    if (std::find(available.begin(), available.end(), l) == available.end()) {
      throw ConfigError("no traces for layer " + std::to_string(l));
    }
  }
  return requested;
}

std::optional<RealMatrix> previous_attention(const fs::path& traces, std::size_t layer) {
  if (layer == 0 || !fs::exists(trace_path(traces, layer - 1, 0))) return std::nullopt;
  return head_mean_attention(load_layer_traces(traces, layer - 1));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dashkv: hashed KV retrieval with tiered mixed-precision attention"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "seed for every random choice")->capture_default_str();

  // gen
  SyntheticConfig gen_cfg;
  fs::path gen_out;
  auto* gen = app.add_subcommand("gen", "generate synthetic attention traces");
  add_synthetic_flags(gen, gen_cfg);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", seed, "seed")->capture_default_str();

  // train
  TrainConfig train_cfg;
  fs::path train_traces;
  fs::path train_out;
  std::vector<std::size_t> train_layers_flag;
  std::string encoder_name = "asymmetric";
  std::string objective_name = "distill";
  auto* train = app.add_subcommand("train", "train per-layer encoders from traces");
  train->add_option("--traces", train_traces, "trace directory")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_option("--layer", train_layers_flag, "layers to train (default all)");
  train->add_option("--seed", seed, "seed")->capture_default_str();
  train->add_option("--steps", train_cfg.steps, "SGD steps")->capture_default_str();
  train->add_option("--lr", train_cfg.learning_rate, "learning rate")->capture_default_str();
  train->add_option("--batch", train_cfg.batch, "rows per step")->capture_default_str();
  train->add_option("--code-bits", train_cfg.code_bits, "code length l")->capture_default_str();
  train->add_option("--min-prefix", train_cfg.min_prefix, "shortest sampled prefix")
      ->capture_default_str();
  train->add_option("--train-seq-len", train_cfg.train_seq_len, "longest sampled prefix")
      ->capture_default_str();
  train->add_option("--encoder", encoder_name, "asymmetric | symmetric")
      ->check(CLI::IsMember({"asymmetric", "symmetric"}))
      ->capture_default_str();
  train->add_option("--objective", objective_name, "distill | mse")
      ->check(CLI::IsMember({"distill", "mse"}))
      ->capture_default_str();
  train->add_option("--tau-t", train_cfg.weights.tau_teacher, "teacher temperature")
      ->capture_default_str();
  train->add_option("--tau-s", train_cfg.weights.tau_student, "student temperature")
      ->capture_default_str();
  train->add_option("--alpha", train_cfg.weights.alpha_balance, "bit balance weight")
      ->capture_default_str();
  train->add_option("--beta", train_cfg.weights.beta_quant, "quantization weight")
      ->capture_default_str();
  add_attention_flags(train, train_cfg.attention);

  // eval
  fs::path eval_traces;
  std::optional<fs::path> eval_ckpt;
  fs::path eval_out;
  std::string variant_flag;
  std::vector<std::size_t> eval_layers_flag;
  EvalOptions eval_opts;
  std::size_t naive_bits = 16;
  auto* eval = app.add_subcommand("eval", "evaluate one variant on traces");
  eval->add_option("--traces", eval_traces, "trace directory")->required();
  eval->add_option("--variant", variant_flag, "naive_lsh | symmetric | asymmetric")
      ->required()
      ->check(CLI::IsMember({"naive_lsh", "symmetric", "asymmetric"}));
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory (trained variants)");
  eval->add_option("--out", eval_out, "metrics CSV")->required();
  eval->add_option("--layer", eval_layers_flag, "layers to evaluate (default all)");
  eval->add_option("--seed", seed, "seed")->capture_default_str();
  eval->add_option("--code-bits", naive_bits, "code length for naive_lsh")
      ->capture_default_str();
  eval->add_option("--k", eval_opts.k, "recall k (0 = max(10, 1% of keys))")
      ->capture_default_str();
  eval->add_option("--row-stride", eval_opts.row_stride, "evaluate every n-th row")
      ->capture_default_str();
  eval->add_option("--min-prefix", eval_opts.min_prefix, "shortest evaluated prefix")
      ->capture_default_str();
  eval->add_flag("--timing", eval_opts.measure_latency, "record per-token latency");
  add_attention_flags(eval, eval_opts.attention);

  // bench
  BenchConfig bench_cfg;
  fs::path bench_out;
  auto* bench = app.add_subcommand("bench", "dense vs hashed per-token latency");
  bench->add_option("--seq-lens", bench_cfg.seq_lens, "ascending key counts")
      ->capture_default_str();
  bench->add_option("--trials", bench_cfg.trials, "timed trials (>= 3)")->capture_default_str();
  bench->add_option("--warmup", bench_cfg.warmup, "untimed warm-up runs")->capture_default_str();
  bench->add_option("--d", bench_cfg.d, "head dimension")->capture_default_str();
  bench->add_option("--code-bits", bench_cfg.code_bits, "code length")->capture_default_str();
  bench->add_option("--heads", bench_cfg.heads, "heads")->capture_default_str();
  bench->add_option("--out", bench_out, "latency CSV")->required();
  bench->add_option("--seed", seed, "seed")->capture_default_str();

  // sensitivity
  SyntheticConfig sens_cfg;
  fs::path sens_ckpt;
  fs::path sens_out;
  AttentionConfig sens_attention;
  std::size_t sens_min_prefix = 64;
  auto* sens = app.add_subcommand("sensitivity", "single-layer replacement distortion");
  add_synthetic_flags(sens, sens_cfg);
  sens->add_option("--checkpoint", sens_ckpt, "checkpoint directory")->required();
  sens->add_option("--out", sens_out, "distortion CSV")->required();
  sens->add_option("--min-prefix", sens_min_prefix, "shortest scored prefix")
      ->capture_default_str();
  sens->add_option("--seed", seed, "seed")->capture_default_str();
  add_attention_flags(sens, sens_attention);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) {
      gen_cfg.seed = seed;
      const SyntheticModel model = make_synthetic_model(gen_cfg);
      fs::create_directories(gen_out);
      // Layers depend on each other through the stream, so the pass is
      // sequential; files are written per (layer, head).
      const auto traces = generate_traces(model, gen_cfg.seq_len, gen_cfg.stream);
      save_traces(gen_out, traces);
      std::cout << "wrote " << traces.size() * gen_cfg.n_heads << " traces to "
                << gen_out.string() << '\n';
    } else if (*train) {
      train_cfg.seed = seed;
      train_cfg.encoder = encoder_name == "symmetric" ? EncoderKind::kSymmetric
                                                      : EncoderKind::kAsymmetric;
      train_cfg.objective = objective_name == "mse" ? ResidualObjective::kMse
                                                    : ResidualObjective::kDistill;
      const auto layers = resolve_layers(train_layers_flag, train_traces);
      fs::create_directories(train_out);
      fan_out(layers.size(), [&](std::size_t i) {
        const std::size_t layer = layers[i];
        const auto traces = load_layer_traces(train_traces, layer);
        const auto prev = previous_attention(train_traces, layer);
        const TrainResult result =
            train_layer(traces, train_cfg, prev ? &*prev : nullptr);
        save_layer_model(train_out, result.model);
        char name[32];
        std::snprintf(name, sizeof(name), "loss_L%03zu.csv", layer);
        auto csv = open_text(train_out / name);
        write_loss_curve_csv(csv, result.curve);
      });
      std::cout << "trained " << layers.size() << " layer(s) into " << train_out.string()
                << '\n';
    } else if (*eval) {
      const Variant variant = *parse_variant(variant_flag);
      if (variant != Variant::kNaiveLsh && !eval_ckpt) {
        throw ConfigError("--checkpoint is required for variant " + variant_flag);
      }
      const auto layers = resolve_layers(eval_layers_flag, eval_traces);
      std::vector<MetricsRecord> records;
      for (std::size_t layer : layers) {
        const auto traces = load_layer_traces(eval_traces, layer);
        const auto prev = previous_attention(eval_traces, layer);
        LayerModel model;
        if (variant == Variant::kNaiveLsh) {
          model = naive_layer_model(layer, traces.size(), traces.front().d, naive_bits,
                                    seed, CalibrationParams{});
        } else {
          model = load_layer_model(*eval_ckpt, layer);
          if (model.heads.front().kind != encoder_kind(variant)) {
            throw ConfigError("checkpoint for layer " + std::to_string(layer) +
                              " was not trained as " + variant_flag);
          }
        }
        records.push_back(evaluate_layer(model, traces, prev ? &*prev : nullptr,
                                         eval_opts, variant_flag));
      }
      auto csv = open_text(eval_out);
      write_metrics_csv(csv, records);
    } else if (*bench) {
      bench_cfg.seed = seed;
      const auto rows = latency_bench(bench_cfg);
      auto csv = open_text(bench_out);
      write_bench_csv(csv, rows);
    } else if (*sens) {
      sens_cfg.seed = seed;
      const SyntheticModel model = make_synthetic_model(sens_cfg);
      std::vector<LayerModel> models;
      for (std::size_t l = 0; l < sens_cfg.n_layers; ++l) {
        models.push_back(load_layer_model(sens_ckpt, l));
      }
      const RealMatrix tokens = sample_tokens(model, sens_cfg.seq_len, sens_cfg.stream);
      const auto rows =
          layer_sensitivity(model, tokens, models, sens_attention, sens_min_prefix);
      auto csv = open_text(sens_out);
      write_sensitivity_csv(csv, rows);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
