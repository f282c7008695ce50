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

#include "dashkv/tiered_attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dashkv/errors.hpp"

namespace dashkv {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Shared by the public matrix overload and the cache-backed pipeline.
template <typename KeyAt>
Vec assemble_scores_impl(std::span<const double> q, KeyAt key_at,
                         std::size_t n_keys, BitCodeView hq,
                         const CodeBank& bank, const TierAssignment& tiers,
                         const ResidualParams& phi, std::size_t d,
                         std::size_t l) {
  require_same_length(tiers.size(), n_keys, "assemble_scores tiers");
  require_same_length(q.size(), d, "assemble_scores query");
  require_same_length(hq.length_bits, l, "assemble_scores code");
  require_same_length(bank.length_bits(), l, "assemble_scores bank");
  if (bank.size() < n_keys) throw DimensionError("assemble_scores: bank too small");

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_l = 1.0 / static_cast<double>(l);

  // The query half of the residual MLP's first layer is shared by every
  // hash-tier key of this step.
  Vec hq_unpacked;
  Vec query_pre;
  bool residual_ready = false;
  auto prepare_residual = [&] {
    if (phi.code_bits() != l) {
      throw DimensionError("assemble_scores: residual expects l=" +
                           std::to_string(phi.code_bits()));
    }
    hq_unpacked = unpack(hq);
    query_pre = phi.b_hidden;
    for (std::size_t r = 0; r < l; ++r) {
      auto row = phi.w_hidden.row(r);
      for (std::size_t c = 0; c < query_pre.size(); ++c) {
        query_pre[c] += hq_unpacked[r] * row[c];
      }
    }
    residual_ready = true;
  };

  Vec scores(n_keys);
  Vec pre(phi.width());
  for (std::size_t i = 0; i < n_keys; ++i) {
    switch (tiers[i]) {
      case Tier::kPrior:
      case Tier::kFull: {
        auto k = key_at(i);
        require_same_length(k.size(), d, "assemble_scores key");
        scores[i] = dot(q, k) * inv_sqrt_d;
        break;
      }
      case Tier::kHashResidual: {
        if (!residual_ready) prepare_residual();
        const BitCodeView hk = bank[i];
        const double inner =
            static_cast<double>(inner_from_hamming(l, hamming(hq, hk)));
        std::copy(query_pre.begin(), query_pre.end(), pre.begin());
        for (std::size_t r = 0; r < l; ++r) {
          const bool set = (hk.words[r / kWordBits] >> (r % kWordBits)) & 1u;
          const double sign = set ? 1.0 : -1.0;
          auto row = phi.w_hidden.row(l + r);
          for (std::size_t c = 0; c < pre.size(); ++c) pre[c] += sign * row[c];
        }
        double delta = phi.b_out[0];
        for (std::size_t c = 0; c < pre.size(); ++c) {
          delta += phi.w_out[c] * gelu(pre[c]);
        }
        scores[i] = inner * inv_l + delta;
        break;
      }
      case Tier::kMasked:
        scores[i] = kNegInf;
        break;
    }
  }
  return scores;
}

}  // namespace

std::vector<std::size_t> build_prior_set(std::size_t seq_len,
                                         const PriorPolicy& policy,
                                         std::size_t* dropped) {
  std::vector<std::size_t> out;
  const std::size_t sink_end = std::min(policy.n_sink, seq_len);
  for (std::size_t i = 0; i < sink_end; ++i) out.push_back(i);
  const std::size_t local_begin =
      seq_len > policy.n_local ? seq_len - policy.n_local : 0;
  for (std::size_t i = local_begin; i < seq_len; ++i) out.push_back(i);
  std::size_t n_dropped = 0;
  for (std::size_t i : policy.extra_indices) {
    if (i < seq_len) {
      out.push_back(i);
    } else {
      ++n_dropped;
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (dropped != nullptr) *dropped = n_dropped;
  return out;
}

Thresholds compute_thresholds(std::span<const double> d_final, double p1,
                              double p2) {
  if (d_final.empty()) {
    throw DegenerateInputError("compute_thresholds: no candidate keys");
  }
  if (!(0.0 <= p1 && p1 <= p2 && p2 <= 100.0)) {
    throw DomainError("compute_thresholds: need 0 <= p1 <= p2 <= 100");
  }
  Vec sorted(d_final.begin(), d_final.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  return {sorted[nearest_rank(p1, n) - 1], sorted[nearest_rank(p2, n) - 1]};
}

TierCounts count_tiers(const TierAssignment& tiers) {
  TierCounts c;
  for (Tier t : tiers) {
    switch (t) {
      case Tier::kPrior: ++c.prior; break;
      case Tier::kFull: ++c.full; break;
      case Tier::kHashResidual: ++c.hash_residual; break;
      case Tier::kMasked: ++c.masked; break;
    }
  }
  return c;
}

TierAssignment assign_tiers(std::span<const double> d_final, double t1,
                            double t2, std::span<const std::size_t> prior) {
  if (t1 > t2) throw DomainError("assign_tiers: t1 > t2");
  TierAssignment tiers(d_final.size());
  for (std::size_t i = 0; i < d_final.size(); ++i) {
    if (d_final[i] <= t1) {
      tiers[i] = Tier::kFull;
    } else if (d_final[i] <= t2) {
      tiers[i] = Tier::kHashResidual;
    } else {
      tiers[i] = Tier::kMasked;
    }
  }
  for (std::size_t i : prior) {
    if (i < tiers.size()) tiers[i] = Tier::kPrior;
  }
  return tiers;
}

ResidualParams ResidualParams::init(std::size_t l, std::size_t width,
                                    std::mt19937_64& rng, double logit_scale) {
  if (l == 0 || width == 0) throw DimensionError("ResidualParams: zero dim");
  ResidualParams p;
  p.w_hidden = RealMatrix(2 * l, width);
  fill_normal(p.w_hidden.data(), std::sqrt(2.0 / static_cast<double>(2 * l)), rng);
  p.b_hidden.assign(width, 0.0);
  p.w_out.resize(width);
  std::uniform_real_distribution<double> tiny(-1e-5, 1e-5);
  for (double& w : p.w_out) w = tiny(rng);
  p.b_out.assign(1, 0.0);
  p.logit_scale = logit_scale;
  return p;
}

ResidualParams ResidualParams::zeros_like(const ResidualParams& p) {
  ResidualParams z;
  z.w_hidden = RealMatrix(p.w_hidden.rows(), p.w_hidden.cols());
  z.b_hidden.assign(p.b_hidden.size(), 0.0);
  z.w_out.assign(p.w_out.size(), 0.0);
  z.b_out.assign(1, 0.0);
  z.logit_scale = p.logit_scale;
  return z;
}

double residual_delta(std::span<const double> hq, std::span<const double> hk,
                      const ResidualParams& phi, ResidualCache* cache) {
  const std::size_t l = phi.code_bits();
  require_same_length(hq.size(), l, "residual_delta hq");
  require_same_length(hk.size(), l, "residual_delta hk");

  ResidualCache local;
  ResidualCache& c = cache != nullptr ? *cache : local;
  c.input.assign(hq.begin(), hq.end());
  c.input.insert(c.input.end(), hk.begin(), hk.end());
  c.pre = vec_mat(c.input, phi.w_hidden);
  for (std::size_t j = 0; j < c.pre.size(); ++j) c.pre[j] += phi.b_hidden[j];
  c.hidden.resize(c.pre.size());
  std::transform(c.pre.begin(), c.pre.end(), c.hidden.begin(), gelu);
  return dot(phi.w_out, c.hidden) + phi.b_out[0];
}

Vec residual_backward(double grad_out, const ResidualParams& phi,
                      const ResidualCache& cache, ResidualParams& grads) {
  grads.b_out[0] += grad_out;
  Vec g_pre(cache.pre.size());
  for (std::size_t j = 0; j < g_pre.size(); ++j) {
    grads.w_out[j] += grad_out * cache.hidden[j];
    g_pre[j] = grad_out * phi.w_out[j] * gelu_grad(cache.pre[j]);
    grads.b_hidden[j] += g_pre[j];
  }
  add_outer(grads.w_hidden, cache.input, g_pre);
  return mat_vec(phi.w_hidden, g_pre);
}

BitCode HeadModel::encode_query(std::span<const double> q) const {
  if (kind == EncoderKind::kAsymmetric) return query_encode(q, query);
  return key_encode(q, key);
}

BitCode HeadModel::encode_key(std::span<const double> k) const {
  return key_encode(k, key);
}

HeadModel HeadModel::init(EncoderKind kind, std::size_t d, std::size_t l,
                          std::mt19937_64& rng, std::size_t residual_width,
                          double logit_scale) {
  HeadModel m;
  m.kind = kind;
  if (kind == EncoderKind::kAsymmetric) {
    m.query = QueryEncoderParams::init(d, l, rng);
  }
  if (kind == EncoderKind::kRandomProjection) {
    // Classic sign-random-projection LSH: unit-variance Gaussian hyperplanes.
    m.key.wk = RealMatrix(d, l);
    fill_normal(m.key.wk.data(), 1.0, rng);
  } else {
    m.key = KeyEncoderParams::init(d, l, rng);
  }
  m.residual = ResidualParams::init(l, residual_width, rng, logit_scale);
  return m;
}

KvCache::KvCache(std::size_t d, std::size_t l) : d_(d), codes_(l) {}

void KvCache::append(std::span<const double> key, std::span<const double> value,
                     const HeadModel& model) {
  require_same_length(key.size(), d_, "KvCache key");
  require_same_length(value.size(), d_, "KvCache value");
  codes_.append(model.encode_key(key));
  keys_.insert(keys_.end(), key.begin(), key.end());
  values_.insert(values_.end(), value.begin(), value.end());
}

std::span<const double> KvCache::key(std::size_t i) const {
  return std::span<const double>(keys_).subspan(i * d_, d_);
}

std::span<const double> KvCache::value(std::size_t i) const {
  return std::span<const double>(values_).subspan(i * d_, d_);
}

RealMatrix KvCache::keys() const { return RealMatrix(size(), d_, keys_); }

KvCache make_kv_cache(const RealMatrix& keys, const RealMatrix& values,
                      const HeadModel& model) {
  require_same_length(keys.rows(), values.rows(), "make_kv_cache rows");
  KvCache cache(keys.cols(), model.code_bits());
  for (std::size_t i = 0; i < keys.rows(); ++i) {
    cache.append(keys.row(i), values.row(i), model);
  }
  return cache;
}

Vec assemble_scores(std::span<const double> q, const RealMatrix& keys,
                    BitCodeView hq, const CodeBank& bank,
                    const TierAssignment& tiers, const ResidualParams& phi,
                    std::size_t d, std::size_t l) {
  require_same_length(keys.cols(), d, "assemble_scores keys");
  return assemble_scores_impl(
      q, [&](std::size_t i) { return keys.row(i); }, keys.rows(), hq, bank,
      tiers, phi, d, l);
}

RealMatrix MixedAttentionResult::probs_matrix() const {
  if (heads.empty()) return {};
  RealMatrix m(heads.size(), heads.front().probs.size());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    std::copy(heads[h].probs.begin(), heads[h].probs.end(), m.row(h).begin());
  }
  return m;
}

MixedAttentionResult mixed_precision_attention(
    std::span<const Vec> queries, std::span<const KvCache> caches,
    std::size_t n_keys, const LayerModel& model, const AttentionConfig& config,
    const Vec* prev_attention) {
  const std::size_t n_heads = model.heads.size();
  require_same_length(queries.size(), n_heads, "mixed attention queries");
  require_same_length(caches.size(), n_heads, "mixed attention caches");
  if (n_keys == 0) throw DegenerateInputError("mixed attention: empty cache");
  for (const KvCache& c : caches) {
    if (c.size() < n_keys) throw DimensionError("mixed attention: cache too short");
  }

  // Raw Hamming distances, one row per head.
  RealMatrix raw(n_heads, n_keys);
  std::vector<BitCode> query_codes;
  query_codes.reserve(n_heads);
  std::vector<std::uint32_t> dist(n_keys);
  for (std::size_t h = 0; h < n_heads; ++h) {
    query_codes.push_back(model.heads[h].encode_query(queries[h]));
    batch_hamming_into(query_codes.back(), caches[h].codes(), n_keys, dist);
    auto row = raw.row(h);
    std::copy(dist.begin(), dist.end(), row.begin());
  }

  CalibrationParams calib = model.calibration;
  calib.num_heads = n_heads;
  const double t_vote = resolve_vote_threshold(raw, calib);
  const auto votes = vote_count(raw, t_vote);
  const Vec spatial = spatial_correction(votes, calib);
  Vec temporal(n_keys, 0.0);
  if (prev_attention != nullptr) {
    if (prev_attention->size() < n_keys) {
      throw DimensionError("mixed attention: momentum entry too short");
    }
    temporal = temporal_correction(
        std::span<const double>(*prev_attention).first(n_keys), calib);
  }

  const auto prior = build_prior_set(n_keys, config.prior);

  MixedAttentionResult result;
  result.heads.resize(n_heads);
  std::vector<std::uint32_t> d_raw(n_keys);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const HeadModel& head = model.heads[h];
    HeadAttention& out = result.heads[h];
    auto row = raw.row(h);
    for (std::size_t i = 0; i < n_keys; ++i) {
      d_raw[i] = static_cast<std::uint32_t>(row[i]);
    }
    out.d_final = calibrate(d_raw, spatial, temporal);

    Vec candidates;
    candidates.reserve(n_keys);
    for (std::size_t i = 0, p = 0; i < n_keys; ++i) {
      if (p < prior.size() && prior[p] == i) {
        ++p;
        continue;
      }
      candidates.push_back(out.d_final[i]);
    }
    Thresholds t{kNegInf, kNegInf};
    if (!candidates.empty()) t = compute_thresholds(candidates, config.p1, config.p2);
    out.tiers = assign_tiers(out.d_final, t.t1, t.t2, prior);

    const std::size_t d = caches[h].dim();
    const std::size_t l = head.code_bits();
    out.scores = assemble_scores_impl(
        queries[h], [&](std::size_t i) { return caches[h].key(i); }, n_keys,
        query_codes[h], caches[h].codes(), out.tiers, head.residual, d, l);

    Vec logits = out.scores;
    for (std::size_t i = 0; i < n_keys; ++i) {
      if (out.tiers[i] == Tier::kHashResidual) logits[i] *= head.residual.logit_scale;
    }
    out.probs = softmax(logits);
    out.output.assign(d, 0.0);
    for (std::size_t i = 0; i < n_keys; ++i) {
      const double p = out.probs[i];
      if (p == 0.0) continue;
      auto v = caches[h].value(i);
      for (std::size_t c = 0; c < d; ++c) out.output[c] += p * v[c];
    }
  }
  return result;
}

Vec full_attention_probs(std::span<const double> q, const RealMatrix& k,
                         std::size_t n_keys, std::size_t d) {
  require_same_length(q.size(), d, "full attention query");
  require_same_length(k.cols(), d, "full attention keys");
  if (n_keys == 0 || n_keys > k.rows()) {
    throw DimensionError("full attention: bad key count");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Vec logits(n_keys);
  for (std::size_t i = 0; i < n_keys; ++i) logits[i] = dot(q, k.row(i)) * inv_sqrt_d;
  return softmax(logits);
}

RealMatrix full_attention_oracle(const RealMatrix& q, const RealMatrix& k,
                                 const RealMatrix& v, std::size_t d) {
  require_same_length(q.cols(), d, "oracle Q");
  require_same_length(k.cols(), d, "oracle K");
  require_same_length(v.rows(), k.rows(), "oracle V rows");
  if (q.rows() > k.rows()) throw DimensionError("oracle: more queries than keys");
  const std::size_t offset = k.rows() - q.rows();
  RealMatrix out(q.rows(), v.cols());
  for (std::size_t r = 0; r < q.rows(); ++r) {
    const std::size_t n = offset + r + 1;
    const Vec p = full_attention_probs(q.row(r), k, n, d);
    auto o = out.row(r);
    for (std::size_t i = 0; i < n; ++i) {
      auto vi = v.row(i);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += p[i] * vi[c];
    }
  }
  return out;
}

}  // namespace dashkv
