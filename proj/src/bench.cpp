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

#include "dashkv/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "dashkv/errors.hpp"
#include "dashkv/hashing.hpp"
#include "dashkv/numerics.hpp"

namespace dashkv {

namespace {

using Clock = std::chrono::steady_clock;

// Keeps results observable so the timed loops are not optimized away.
volatile double g_sink = 0.0;

struct Workload {
  std::size_t n = 0;
  std::vector<RealMatrix> keys;  // per head, n x d
  std::vector<Vec> queries;      // per head
  std::vector<CodeBank> banks;   // per head
  std::vector<BitCode> query_codes;
  Vec prev_attention;            // n
};

Workload make_workload(const BenchConfig& c, std::size_t n, std::mt19937_64& rng) {
  Workload w;
  w.n = n;
  for (std::size_t h = 0; h < c.heads; ++h) {
    RealMatrix k(n, c.d);
    fill_normal(k.data(), 1.0, rng);
    w.keys.push_back(std::move(k));
    Vec q(c.d);
    fill_normal(q, 1.0, rng);
    w.queries.push_back(std::move(q));

    CodeBank bank(c.code_bits);
    bank.reserve(n);
    BitCode code(c.code_bits);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t b = 0; b < c.code_bits; ++b) code.set_bit(b, (rng() & 1u) != 0);
      bank.append(code);
    }
    w.banks.push_back(std::move(bank));
    BitCode qc(c.code_bits);
    for (std::size_t b = 0; b < c.code_bits; ++b) qc.set_bit(b, (rng() & 1u) != 0);
    w.query_codes.push_back(std::move(qc));
  }
  w.prev_attention.assign(n, 1.0 / static_cast<double>(n));
  return w;
}

double dense_pass(const BenchConfig& c, const Workload& w, Vec& scores) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c.d));
  double acc = 0.0;
  for (std::size_t h = 0; h < c.heads; ++h) {
    const auto& k = w.keys[h];
    const double* q = w.queries[h].data();
    for (std::size_t i = 0; i < w.n; ++i) {
      const double* ki = k.row(i).data();
      double s = 0.0;
      for (std::size_t j = 0; j < c.d; ++j) s += q[j] * ki[j];
      scores[i] = s * inv_sqrt_d;
    }
    acc += scores[w.n / 2];
  }
  return acc;
}

struct FilterScratch {
  std::vector<std::vector<std::uint32_t>> raw;
  std::vector<std::uint32_t> histogram;
  std::vector<std::uint32_t> buckets;
  Vec base;
  Vec d_final;
  Vec candidates;
  std::vector<std::uint32_t> gathered;
};

constexpr std::size_t kSelectBuckets = 1024;

// Exact order statistic of rank r (0-based) in v, whose values lie in
// [lo, hi]. One histogram pass narrows the search to a single bucket.
double bucket_select(std::span<const double> v, double lo, double hi, std::size_t r,
                     FilterScratch& s) {
  if (!(hi > lo)) return lo;
  const double scale = static_cast<double>(kSelectBuckets) / (hi - lo);
  auto bucket_of = [&](double x) {
    const auto b = static_cast<std::size_t>((x - lo) * scale);
    return std::min(b, kSelectBuckets - 1);
  };
  std::fill(s.buckets.begin(), s.buckets.end(), 0u);
  for (double x : v) ++s.buckets[bucket_of(x)];
  std::size_t below = 0;
  std::size_t target = 0;
  while (below + s.buckets[target] <= r) below += s.buckets[target++];
  s.candidates.clear();
  for (double x : v) {
    if (bucket_of(x) == target) s.candidates.push_back(x);
  }
  const auto nth = s.candidates.begin() + static_cast<std::ptrdiff_t>(r - below);
  std::nth_element(s.candidates.begin(), nth, s.candidates.end());
  return *nth;
}

double hashed_pass(const BenchConfig& c, const Workload& w, FilterScratch& s) {
  const std::size_t n = w.n;
  const std::size_t heads = c.heads;
  for (std::size_t h = 0; h < heads; ++h) {
    batch_hamming_into(w.query_codes[h], w.banks[h], n, s.raw[h]);
  }

  // Vote threshold: 25th percentile of the pooled integer distances.
  std::fill(s.histogram.begin(), s.histogram.end(), 0u);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::uint32_t v : s.raw[h]) ++s.histogram[v];
  }
  const std::size_t rank = nearest_rank(25.0, heads * n);
  std::size_t seen = 0;
  double t_vote = 0.0;
  for (std::size_t v = 0; v < s.histogram.size(); ++v) {
    seen += s.histogram[v];
    if (seen >= rank) {
      t_vote = static_cast<double>(v);
      break;
    }
  }

  const double inv_heads = 1.0 / static_cast<double>(heads);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t votes = 0;
    for (std::size_t h = 0; h < heads; ++h) votes += s.raw[h][i] < t_vote;
    s.base[i] = -static_cast<double>(votes) * inv_heads - sigmoid(w.prev_attention[i]);
  }

  const std::size_t r1 = nearest_rank(c.p1, n) - 1;
  const std::size_t r2 = nearest_rank(c.p2, n) - 1;
  double acc = 0.0;
  for (std::size_t h = 0; h < heads; ++h) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = static_cast<double>(s.raw[h][i]) + s.base[i];
      s.d_final[i] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double t1 = bucket_select(s.d_final, lo, hi, r1, s);
    const double t2 = bucket_select(s.d_final, lo, hi, r2, s);
    s.gathered.clear();
    std::size_t hash_tier = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = s.d_final[i];
      if (v <= t1) {
        s.gathered.push_back(static_cast<std::uint32_t>(i));
      } else {
        hash_tier += v <= t2;
      }
    }
    acc += static_cast<double>(s.gathered.size() + hash_tier);
  }
  return acc;
}

template <typename F>
std::vector<double> time_trials(std::size_t warmup, std::size_t trials, F&& f) {
  for (std::size_t i = 0; i < warmup; ++i) g_sink = g_sink + f();
  std::vector<double> us;
  us.reserve(trials);
  for (std::size_t i = 0; i < trials; ++i) {
    const auto start = Clock::now();
    const double r = f();
    const auto stop = Clock::now();
    g_sink = g_sink + r;
    us.push_back(std::chrono::duration<double, std::micro>(stop - start).count());
  }
  return us;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

std::vector<BenchRow> latency_bench(const BenchConfig& c) {
  if (c.seq_lens.empty()) throw ConfigError("bench: no sequence lengths");
  if (!std::is_sorted(c.seq_lens.begin(), c.seq_lens.end()) ||
      std::adjacent_find(c.seq_lens.begin(), c.seq_lens.end()) != c.seq_lens.end()) {
    throw ConfigError("bench: sequence lengths must be strictly ascending");
  }
  if (c.trials < 3) throw ConfigError("bench: trials must be >= 3");
  if (c.heads == 0 || c.d == 0 || c.code_bits == 0) {
    throw ConfigError("bench: heads, d and code bits must be positive");
  }
  if (c.seq_lens.front() == 0) throw ConfigError("bench: zero sequence length");

  std::seed_seq seq{c.seed, std::uint64_t{0xBE7C}};
  std::mt19937_64 rng(seq);
  std::vector<BenchRow> rows;
  for (std::size_t n : c.seq_lens) {
    const Workload w = make_workload(c, n, rng);
    Vec scores(n);
    FilterScratch s;
    s.raw.assign(c.heads, std::vector<std::uint32_t>(n));
    s.histogram.assign(c.code_bits + 1, 0u);
    s.base.resize(n);
    s.d_final.resize(n);
    s.buckets.resize(kSelectBuckets);
    s.candidates.reserve(n);
    s.gathered.reserve(n);

    const auto dense = time_trials(c.warmup, c.trials, [&] { return dense_pass(c, w, scores); });
    const auto hashed = time_trials(c.warmup, c.trials, [&] { return hashed_pass(c, w, s); });
    BenchRow row;
    row.seq_len = n;
    row.dense_median_us = median(dense);
    row.dense_min_us = *std::min_element(dense.begin(), dense.end());
    row.dense_max_us = *std::max_element(dense.begin(), dense.end());
    row.hashed_median_us = median(hashed);
    row.hashed_min_us = *std::min_element(hashed.begin(), hashed.end());
    row.hashed_max_us = *std::max_element(hashed.begin(), hashed.end());
    rows.push_back(row);
  }
  return rows;
}

double loglog_slope(std::span<const double> n, std::span<const double> cost) {
  require_same_length(n.size(), cost.size(), "loglog_slope");
  if (n.size() < 2) throw DegenerateInputError("loglog_slope: need two points");
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (!(n[i] > 0.0) || !(cost[i] > 0.0)) throw DomainError("loglog_slope: non-positive input");
    mx += std::log(n[i]);
    my += std::log(cost[i]);
  }
  mx /= static_cast<double>(n.size());
  my /= static_cast<double>(n.size());
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double dx = std::log(n[i]) - mx;
    sxy += dx * (std::log(cost[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw DegenerateInputError("loglog_slope: all n equal");
  return sxy / sxx;
}

void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows) {
  out << kBenchHeader << '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.seq_len,
                  r.dense_median_us, r.dense_min_us, r.dense_max_us,
                  r.hashed_median_us, r.hashed_min_us, r.hashed_max_us);
    out << buf << '\n';
  }
}

}  // namespace dashkv
