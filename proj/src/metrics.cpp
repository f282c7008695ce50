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

#include "dashkv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <sstream>

#include "dashkv/errors.hpp"

namespace dashkv {

namespace {

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double recall_at_k(std::span<const std::size_t> approx_ranking,
                   std::span<const std::size_t> true_ranking, std::size_t k) {
  if (k == 0) throw DomainError("recall_at_k: k = 0");
  require_same_length(approx_ranking.size(), true_ranking.size(), "recall_at_k");
  if (k > approx_ranking.size()) throw DomainError("recall_at_k: k exceeds key count");
  std::vector<std::size_t> a(approx_ranking.begin(), approx_ranking.begin() + k);
  std::vector<std::size_t> t(true_ranking.begin(), true_ranking.begin() + k);
  std::sort(a.begin(), a.end());
  std::sort(t.begin(), t.end());
  std::vector<std::size_t> common;
  std::set_intersection(a.begin(), a.end(), t.begin(), t.end(),
                        std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(k);
}

std::size_t default_recall_k(std::size_t n_keys) {
  if (n_keys >= 10000) return 100;
  return std::min(n_keys, std::max<std::size_t>(10, n_keys / 100));
}

std::vector<std::size_t> rank_ascending(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return values[a] < values[b];
  });
  return idx;
}

std::vector<std::size_t> rank_descending(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return values[a] > values[b];
  });
  return idx;
}

double kl_divergence_metric(std::span<const double> p_approx,
                            std::span<const double> p_full) {
  require_same_length(p_approx.size(), p_full.size(), "kl_divergence_metric");
  if (p_approx.empty()) throw DegenerateInputError("kl_divergence_metric: empty");
  double sp = 0.0;
  double sq = 0.0;
  for (std::size_t i = 0; i < p_approx.size(); ++i) {
    if (!(p_approx[i] >= 0.0) || !(p_full[i] >= 0.0)) {
      throw DomainError("kl_divergence_metric: negative or NaN probability");
    }
    sp += p_approx[i] + kKlSmoothing;
    sq += p_full[i] + kKlSmoothing;
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p_approx.size(); ++i) {
    const double p = (p_approx[i] + kKlSmoothing) / sp;
    const double q = (p_full[i] + kKlSmoothing) / sq;
    kl += p * std::log(p / q);
  }
  return std::max(0.0, kl);
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records) {
  out << kMetricsHeader << '\n';
  for (const auto& r : records) {
    out << r.variant << ',' << r.layer << ',' << r.seq_len << ',' << r.k << ','
        << fmt_real(r.recall_at_k) << ',' << fmt_real(r.kl_to_full) << ','
        << (r.mean_latency_per_token_us ? fmt_real(*r.mean_latency_per_token_us)
                                        : std::string("NA"))
        << '\n';
  }
}

void write_loss_curve_csv(std::ostream& out, std::span<const LossRecord> curve) {
  out << kLossCurveHeader << '\n';
  for (const auto& r : curve) {
    out << r.step << ',' << fmt_real(r.l_distill) << ',' << fmt_real(r.l_bal)
        << ',' << fmt_real(r.l_quant) << ',' << fmt_real(r.l_total) << ','
        << fmt_real(r.beta_anneal) << '\n';
  }
}

CsvTable parse_csv(std::istream& in) {
  const auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("csv: missing header");
  table.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != table.header.size()) {
      throw FormatError("csv: row has " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(cells));
  }
  return table;
}

}  // namespace dashkv
