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

// On-disk formats for attention traces (DKVT) and per-head parameter
// checkpoints (DKVP). All integers and reals are little-endian; matrices
// are row-major 8-byte reals.
//
// DKVT: "DKVT" u16 version, u32 layer, head, d, n_q, n_k, then Q, K, V,
//       teacher_logits (-inf for causally masked entries).
// DKVP: "DKVP" u16 version, u32 d, l, layer, head, then
//       u16 encoder kind, u32 head count,
//       [w1, ln_gain, ln_bias, w2, w3 when the kind is asymmetric], wk,
//       u32 residual width, w_hidden, b_hidden, w_out, b_out, logit_scale,
//       beta_spatial, gamma_temporal, t_vote, u8 vote mode.

#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <vector>

#include "dashkv/tiered_attention.hpp"
#include "dashkv/training.hpp"

namespace dashkv {

constexpr std::uint16_t kTraceVersion = 1;
constexpr std::uint16_t kCheckpointVersion = 1;

void write_trace(std::ostream& out, const AttentionTrace& trace);
/// Verifies the teacher logits against Q and K after reading.
AttentionTrace read_trace(std::istream& in);

struct HeadCheckpoint {
  std::uint32_t layer = 0;
  std::uint32_t head = 0;
  std::uint32_t n_heads = 1;
  HeadModel model;
  CalibrationParams calibration;
};

void write_checkpoint(std::ostream& out, const HeadCheckpoint& ckpt);
HeadCheckpoint read_checkpoint(std::istream& in);

std::filesystem::path trace_path(const std::filesystem::path& dir,
                                 std::size_t layer, std::size_t head);
std::filesystem::path checkpoint_path(const std::filesystem::path& dir,
                                      std::size_t layer, std::size_t head);

/// One file per (layer, head).
void save_traces(const std::filesystem::path& dir,
                 const std::vector<std::vector<AttentionTrace>>& traces);
/// All heads of one layer, in head order. Throws ConfigError when the
/// layer has no trace files.
std::vector<AttentionTrace> load_layer_traces(const std::filesystem::path& dir,
                                              std::size_t layer);
/// Layers that have a head-0 trace file, ascending.
std::vector<std::size_t> list_trace_layers(const std::filesystem::path& dir);

void save_layer_model(const std::filesystem::path& dir, const LayerModel& model);
/// Throws ConfigError when the layer's checkpoint files are missing.
LayerModel load_layer_model(const std::filesystem::path& dir, std::size_t layer);

}  // namespace dashkv
