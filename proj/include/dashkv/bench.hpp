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

// Per-token decode cost of a dense full-precision score pass versus the
// hashed filter pass (Hamming scan, cross-head vote, momentum discount,
// tier thresholds, top-tier gather). Single-threaded.

#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

namespace dashkv {

struct BenchConfig {
  std::vector<std::size_t> seq_lens{4096, 8192, 16384, 32768, 65536};
  std::size_t trials = 11;
  std::size_t warmup = 10;
  std::size_t d = 128;
  std::size_t code_bits = 128;
  std::size_t heads = 4;
  double p1 = 10.0;
  double p2 = 50.0;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t seq_len = 0;
  double dense_median_us = 0.0;
  double dense_min_us = 0.0;
  double dense_max_us = 0.0;
  double hashed_median_us = 0.0;
  double hashed_min_us = 0.0;
  double hashed_max_us = 0.0;
};

constexpr const char* kBenchHeader =
    "seq_len,dense_median_us,dense_min_us,dense_max_us,hashed_median_us,"
    "hashed_min_us,hashed_max_us";

/// Throws ConfigError unless seq_lens is non-empty and ascending and
/// trials >= 3.
std::vector<BenchRow> latency_bench(const BenchConfig& config);

/// Least-squares slope of log(cost) against log(n).
double loglog_slope(std::span<const double> n, std::span<const double> cost);

void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows);

}  // namespace dashkv
