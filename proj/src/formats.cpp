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

#include "dashkv/formats.hpp"

#include <cstdio>
#include <fstream>
#include <string>

#include "dashkv/binary_io.hpp"
#include "dashkv/errors.hpp"

namespace dashkv {

namespace {

namespace fs = std::filesystem;
using binary::read_f64;
using binary::read_f64s;
using binary::read_le;
using binary::write_f64;
using binary::write_f64s;
using binary::write_le;

constexpr std::uint32_t kMaxDim = 1u << 20;

void write_matrix(std::ostream& out, const RealMatrix& m) {
  write_f64s(out, m.data());
}

RealMatrix read_matrix(std::istream& in, std::size_t rows, std::size_t cols) {
  RealMatrix m(rows, cols);
  read_f64s(in, m.data());
  return m;
}

Vec read_vec(std::istream& in, std::size_t n) {
  Vec v(n);
  read_f64s(in, v);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw FormatError(std::string(what) + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

std::uint32_t read_dim(std::istream& in, const char* what) {
  const auto v = read_le<std::uint32_t>(in);
  if (v > kMaxDim) throw FormatError(std::string(what) + " implausibly large");
  return v;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  return in;
}

std::string indexed_name(const char* stem, std::size_t layer, std::size_t head,
                         const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_L%03zu_H%03zu.%s", stem, layer, head, ext);
  return buf;
}

}  // namespace

void write_trace(std::ostream& out, const AttentionTrace& t) {
  if (t.q.cols() != t.d || t.k.cols() != t.d || t.v.cols() != t.d ||
      t.v.rows() != t.k.rows() || t.teacher_logits.rows() != t.n_q() ||
      t.teacher_logits.cols() != t.n_k()) {
    throw DimensionError("write_trace: inconsistent shapes");
  }
  binary::write_magic(out, "DKVT");
  write_le(out, kTraceVersion);
  write_le(out, t.layer);
  write_le(out, t.head);
  write_le(out, t.d);
  write_le(out, checked_u32(t.n_q(), "n_q"));
  write_le(out, checked_u32(t.n_k(), "n_k"));
  write_matrix(out, t.q);
  write_matrix(out, t.k);
  write_matrix(out, t.v);
  write_matrix(out, t.teacher_logits);
  if (!out) throw FormatError("write_trace: stream failure");
}

AttentionTrace read_trace(std::istream& in) {
  binary::expect_magic(in, "DKVT");
  const auto version = read_le<std::uint16_t>(in);
  if (version != kTraceVersion) {
    throw FormatError("DKVT: unsupported version " + std::to_string(version));
  }
  AttentionTrace t;
  t.layer = read_le<std::uint32_t>(in);
  t.head = read_le<std::uint32_t>(in);
  t.d = read_dim(in, "d");
  const std::uint32_t n_q = read_dim(in, "n_q");
  const std::uint32_t n_k = read_dim(in, "n_k");
  if (n_q > n_k) throw FormatError("DKVT: n_q > n_k");
  t.q = read_matrix(in, n_q, t.d);
  t.k = read_matrix(in, n_k, t.d);
  t.v = read_matrix(in, n_k, t.d);
  t.teacher_logits = read_matrix(in, n_q, n_k);
  t.check_consistency();
  return t;
}

void write_checkpoint(std::ostream& out, const HeadCheckpoint& c) {
  const HeadModel& m = c.model;
  binary::write_magic(out, "DKVP");
  write_le(out, kCheckpointVersion);
  write_le(out, checked_u32(m.input_dim(), "d"));
  write_le(out, checked_u32(m.code_bits(), "l"));
  write_le(out, c.layer);
  write_le(out, c.head);
  write_le(out, static_cast<std::uint16_t>(m.kind));
  write_le(out, c.n_heads);
  const auto put = [&](std::span<const double> t) { write_f64s(out, t); };
  if (m.kind == EncoderKind::kAsymmetric) m.query.for_each_tensor(put);
  m.key.for_each_tensor(put);
  write_le(out, checked_u32(m.residual.width(), "residual width"));
  m.residual.for_each_tensor(put);
  write_f64(out, m.residual.logit_scale);
  write_f64(out, c.calibration.beta_spatial);
  write_f64(out, c.calibration.gamma_temporal);
  write_f64(out, c.calibration.t_vote);
  write_le(out, static_cast<std::uint8_t>(c.calibration.vote_mode));
  if (!out) throw FormatError("write_checkpoint: stream failure");
}

HeadCheckpoint read_checkpoint(std::istream& in) {
  binary::expect_magic(in, "DKVP");
  const auto version = read_le<std::uint16_t>(in);
  if (version != kCheckpointVersion) {
    throw FormatError("DKVP: unsupported version " + std::to_string(version));
  }
  HeadCheckpoint c;
  const std::uint32_t d = read_dim(in, "d");
  const std::uint32_t l = read_dim(in, "l");
  c.layer = read_le<std::uint32_t>(in);
  c.head = read_le<std::uint32_t>(in);
  const auto kind = read_le<std::uint16_t>(in);
  if (kind > static_cast<std::uint16_t>(EncoderKind::kRandomProjection)) {
    throw FormatError("DKVP: unknown encoder kind " + std::to_string(kind));
  }
  c.n_heads = read_le<std::uint32_t>(in);
  HeadModel& m = c.model;
  m.kind = static_cast<EncoderKind>(kind);
  if (m.kind == EncoderKind::kAsymmetric) {
    m.query.w1 = read_matrix(in, d, kQueryHidden);
    m.query.ln_gain = read_vec(in, kQueryHidden);
    m.query.ln_bias = read_vec(in, kQueryHidden);
    m.query.w2 = read_matrix(in, kQueryHidden, kQueryHidden);
    m.query.w3 = read_matrix(in, kQueryHidden, l);
  }
  m.key.wk = read_matrix(in, d, l);
  const std::uint32_t width = read_dim(in, "residual width");
  m.residual.w_hidden = read_matrix(in, 2 * std::size_t{l}, width);
  m.residual.b_hidden = read_vec(in, width);
  m.residual.w_out = read_vec(in, width);
  m.residual.b_out = read_vec(in, 1);
  m.residual.logit_scale = read_f64(in);
  c.calibration.beta_spatial = read_f64(in);
  c.calibration.gamma_temporal = read_f64(in);
  c.calibration.t_vote = read_f64(in);
  const auto mode = read_le<std::uint8_t>(in);
  if (mode > static_cast<std::uint8_t>(VoteThresholdMode::kPercentile)) {
    throw FormatError("DKVP: unknown vote mode");
  }
  c.calibration.vote_mode = static_cast<VoteThresholdMode>(mode);
  c.calibration.num_heads = c.n_heads;
  return c;
}

fs::path trace_path(const fs::path& dir, std::size_t layer, std::size_t head) {
  return dir / indexed_name("trace", layer, head, "dkvt");
}

fs::path checkpoint_path(const fs::path& dir, std::size_t layer,
                         std::size_t head) {
  return dir / indexed_name("ckpt", layer, head, "dkvp");
}

void save_traces(const fs::path& dir,
                 const std::vector<std::vector<AttentionTrace>>& traces) {
  fs::create_directories(dir);
  for (const auto& layer : traces) {
    for (const auto& t : layer) {
      auto out = open_out(trace_path(dir, t.layer, t.head));
      write_trace(out, t);
    }
  }
}

std::vector<AttentionTrace> load_layer_traces(const fs::path& dir,
                                              std::size_t layer) {
  std::vector<AttentionTrace> out;
  for (std::size_t h = 0;; ++h) {
    const fs::path p = trace_path(dir, layer, h);
    if (!fs::exists(p)) break;
    auto in = open_in(p);
    out.push_back(read_trace(in));
    if (out.back().layer != layer || out.back().head != h) {
      throw FormatError(p.string() + ": header does not match file name");
    }
  }
  if (out.empty()) {
    throw ConfigError("no traces for layer " + std::to_string(layer) + " in " +
                      dir.string());
  }
  return out;
}

std::vector<std::size_t> list_trace_layers(const fs::path& dir) {
  std::vector<std::size_t> layers;
  if (!fs::is_directory(dir)) return layers;
  for (std::size_t l = 0; fs::exists(trace_path(dir, l, 0)); ++l) layers.push_back(l);
  return layers;
}

void save_layer_model(const fs::path& dir, const LayerModel& model) {
  fs::create_directories(dir);
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    auto out = open_out(checkpoint_path(dir, model.layer, h));
    write_checkpoint(out, HeadCheckpoint{checked_u32(model.layer, "layer"),
                                         checked_u32(h, "head"),
                                         checked_u32(model.heads.size(), "heads"),
                                         model.heads[h], model.calibration});
  }
}

LayerModel load_layer_model(const fs::path& dir, std::size_t layer) {
  const fs::path first = checkpoint_path(dir, layer, 0);
  if (!fs::exists(first)) {
    throw ConfigError("missing checkpoint for layer " + std::to_string(layer) +
                      ": " + first.string());
  }
  LayerModel model;
  model.layer = layer;
  std::size_t n_heads = 1;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const fs::path p = checkpoint_path(dir, layer, h);
    if (!fs::exists(p)) throw ConfigError("missing checkpoint " + p.string());
    auto in = open_in(p);
    HeadCheckpoint c = read_checkpoint(in);
    if (c.layer != layer || c.head != h) {
      throw FormatError(p.string() + ": header does not match file name");
    }
    if (h == 0) {
      n_heads = c.n_heads;
      model.calibration = c.calibration;
    } else if (c.n_heads != n_heads) {
      throw FormatError(p.string() + ": head count disagrees with head 0");
    }
    model.heads.push_back(std::move(c.model));
  }
  return model;
}

}  // namespace dashkv
