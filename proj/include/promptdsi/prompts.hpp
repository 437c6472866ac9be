// Copyright 2026 The PromptDSI Authors.
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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptdsi/encoder.hpp"
#include "promptdsi/errors.hpp"
#include "promptdsi/numerics.hpp"
#include "promptdsi/rng.hpp"
#include "promptdsi/tensor.hpp"

namespace promptdsi {

enum class PoolStrategy { kL2P, kSPP, kCODA, kTopic };

inline std::string to_string(PoolStrategy s) {
  switch (s) {
    case PoolStrategy::kL2P: return "L2P";
    case PoolStrategy::kSPP: return "SPP";
    case PoolStrategy::kCODA: return "CODA";
    case PoolStrategy::kTopic: return "TOPIC";
  }
  return "?";
}

struct PoolConfig {
  int pool_size = 5;          // L2P
  int prompt_length = 20;     // L2P / SPP / TOPIC
  int top_n = 1;
  int coda_prompts_per_task = 2;
  int coda_prompt_length = 10;
  double match_weight = 1.0;
  bool topic_freeze_previous = false;  // ablation: freeze TOPIC prompts after each timestep
};

/// One key-prompt pair. `prompt` holds, for every prompting layer, m rows:
/// the first m/2 are p_k and the last m/2 are p_v.
template <class T>
struct PromptEntry {
  Tensor<T> prompt;     // [prompt_layers, m, dim]
  Tensor<T> key;        // [dim]
  Tensor<T> attention;  // [dim], CODA only
  bool frozen = false;
  bool key_frozen = false;
  int provenance = 0;  // timestep (L2P/SPP/CODA) or topic id (TOPIC)
};

template <class T>
class PromptPool {
 public:
  PromptPool() = default;
  PromptPool(PoolStrategy strategy, std::size_t dim, std::size_t prompt_layers,
             std::size_t prompt_length, std::size_t top_n)
      : strategy_(strategy),
        dim_(dim),
        prompt_layers_(prompt_layers),
        prompt_length_(prompt_length),
        top_n_(top_n) {
    PROMPTDSI_REQUIRE(prompt_length % 2 == 0, ConfigError, "prompt length must be even");
    PROMPTDSI_REQUIRE(top_n >= 1, ConfigError, "top-N must be >= 1");
  }

  PoolStrategy strategy() const { return strategy_; }
  std::size_t dim() const { return dim_; }
  std::size_t prompt_layers() const { return prompt_layers_; }
  std::size_t prompt_length() const { return prompt_length_; }
  std::size_t half_length() const { return prompt_length_ / 2; }
  std::size_t top_n() const { return top_n_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool uses_match_loss() const {
    return strategy_ == PoolStrategy::kL2P || strategy_ == PoolStrategy::kSPP;
  }

  const std::vector<PromptEntry<T>>& entries() const { return entries_; }
  std::vector<PromptEntry<T>>& entries() { return entries_; }
  const PromptEntry<T>& entry(std::size_t i) const { return entries_.at(i); }
  PromptEntry<T>& entry(std::size_t i) { return entries_.at(i); }

  /// Bumped on every mutation; selections remember the generation they saw.
  std::uint64_t generation() const { return generation_; }
  void mark_modified() { ++generation_; }

  Tensor<T> new_prompt_tensor() const {
    return Tensor<T>({prompt_layers_, prompt_length_, dim_});
  }

  /// Prefix for prompting layer `layer_slot` (0-based within the prompting
  /// layers) built from the given entries, concatenated in order.
  Prefix<T> prefix_from(std::span<const std::size_t> ids, std::size_t layer_slot) const {
    Prefix<T> p;
    const std::size_t half = half_length();
    p.keys = Tensor<T>({half * ids.size(), dim_});
    p.values = Tensor<T>({half * ids.size(), dim_});
    for (std::size_t j = 0; j < ids.size(); ++j) {
      const T* src = entries_.at(ids[j]).prompt.data() + layer_slot * prompt_length_ * dim_;
      std::copy(src, src + half * dim_, p.keys.data() + j * half * dim_);
      std::copy(src + half * dim_, src + 2 * half * dim_, p.values.data() + j * half * dim_);
    }
    return p;
  }

  template <class U>
  PromptPool<U> cast() const {
    PromptPool<U> out(strategy_, dim_, prompt_layers_, prompt_length_, top_n_);
    for (const auto& e : entries_) {
      PromptEntry<U> c;
      c.prompt = e.prompt.template cast<U>();
      c.key = e.key.template cast<U>();
      c.attention = e.attention.template cast<U>();
      c.frozen = e.frozen;
      c.key_frozen = e.key_frozen;
      c.provenance = e.provenance;
      out.entries().push_back(std::move(c));
    }
    return out;
  }

 private:
  PoolStrategy strategy_ = PoolStrategy::kL2P;
  std::size_t dim_ = 0;
  std::size_t prompt_layers_ = 1;
  std::size_t prompt_length_ = 0;
  std::size_t top_n_ = 1;
  std::vector<PromptEntry<T>> entries_;
  std::uint64_t generation_ = 0;
};

template <class T>
struct SelectionResult {
  std::vector<std::size_t> ids;  // ascending distance, then ascending id
  std::vector<T> distances;      // aligned with ids
  std::vector<T> weights;        // CODA alphas over the whole pool
  T match_loss{0};
  Tensor<T> embedding;  // the selection embedding that was used
  std::uint64_t generation = 0;
};

/// Top-N selection: the N keys with the smallest cosine distance to h. Ties
/// go to the lower id. `candidates` restricts the search when non-empty.
template <class T>
SelectionResult<T> select_topN(const Tensor<T>& h, const PromptPool<T>& pool,
                               std::span<const std::size_t> candidates = {}) {
  PROMPTDSI_REQUIRE(!pool.empty(), ContractError, "empty prompt pool");
  std::vector<std::size_t> ids;
  if (candidates.empty()) {
    ids.resize(pool.size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
  } else {
    ids.assign(candidates.begin(), candidates.end());
  }
  const auto hv = h.values();
  PROMPTDSI_REQUIRE(l2_norm(hv) > T{0}, DomainError, "zero-norm selection embedding");
  std::vector<std::pair<T, std::size_t>> scored;
  scored.reserve(ids.size());
  for (std::size_t i : ids) {
    const auto& k = pool.entry(i).key;
    PROMPTDSI_REQUIRE(l2_norm(k.values()) > T{0}, DomainError,
                      "zero-norm key " + std::to_string(i));
    scored.emplace_back(cosine_distance(hv, k.values()), i);
  }
  const std::size_t n = std::min(pool.top_n(), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + std::ptrdiff_t(n), scored.end());
  SelectionResult<T> out;
  for (std::size_t j = 0; j < n; ++j) {
    out.ids.push_back(scored[j].second);
    out.distances.push_back(scored[j].first);
    out.match_loss += scored[j].first;
  }
  out.embedding = h;
  out.generation = pool.generation();
  return out;
}

/// Gradients of L_match = sum_{i in S_q} (1 - cos(h, k_i)), scaled by
/// `scale`. The selection is a constant. Frozen keys, and every key of a
/// TOPIC pool, receive nothing.
template <class T>
void match_loss_grad(const Tensor<T>& h, const PromptPool<T>& pool,
                     const SelectionResult<T>& sel, T scale,
                     std::vector<Tensor<T>>& key_grads, Tensor<T>* d_h = nullptr) {
  PROMPTDSI_REQUIRE(sel.generation == pool.generation(), ContractError,
                    "stale selection: pool changed since select_topN");
  PROMPTDSI_REQUIRE(key_grads.size() == pool.size(), ContractError,
                    "one key gradient per pool entry");
  const bool keys_learnable = pool.strategy() != PoolStrategy::kTopic;
  for (std::size_t i : sel.ids) {
    const auto& e = pool.entry(i);
    if (keys_learnable && !e.frozen && !e.key_frozen) {
      if (key_grads[i].empty()) key_grads[i] = Tensor<T>(e.key.shape());
      accumulate_cosine_grad<T>(e.key.values(), h.values(), -scale, key_grads[i].values());
    }
    if (d_h) accumulate_cosine_grad<T>(h.values(), e.key.values(), -scale, d_h->values());
  }
}

template <class T>
struct ComposedPrompt {
  Tensor<T> prompt;       // [prompt_layers, m, dim]
  std::vector<T> alphas;  // one per pool entry
};

/// alpha_i = cos(h * A_i, k_i); prompt = sum_i alpha_i p_i over every entry.
template <class T>
ComposedPrompt<T> coda_compose(const Tensor<T>& h, const PromptPool<T>& pool) {
  PROMPTDSI_REQUIRE(pool.strategy() == PoolStrategy::kCODA, ContractError,
                    "coda_compose needs a CODA pool");
  PROMPTDSI_REQUIRE(!pool.empty(), ContractError, "empty prompt pool");
  ComposedPrompt<T> out{pool.new_prompt_tensor(), {}};
  std::vector<T> mod(h.size());
  for (const auto& e : pool.entries()) {
    for (std::size_t c = 0; c < mod.size(); ++c) mod[c] = h[c] * e.attention[c];
    PROMPTDSI_REQUIRE(l2_norm<T>(mod) > T{0}, DomainError, "zero-norm modulated query");
    const T alpha = T{1} - cosine_distance<T>(mod, e.key.values());
    out.alphas.push_back(alpha);
    out.prompt.vector() += alpha * e.prompt.vector();
  }
  return out;
}

template <class T>
struct PoolGrads {
  std::vector<Tensor<T>> prompts, keys, attention;  // empty tensor = no gradient

  explicit PoolGrads(std::size_t n = 0) : prompts(n), keys(n), attention(n) {}

  static Tensor<T>& ensure(Tensor<T>& g, const Tensor<T>& like) {
    if (g.empty()) g = Tensor<T>(like.shape());
    return g;
  }
};

/// Backward of coda_compose given d(composed prompt).
template <class T>
void coda_backward(const Tensor<T>& h, const PromptPool<T>& pool,
                   const ComposedPrompt<T>& composed, const Tensor<T>& d_prompt,
                   PoolGrads<T>& grads, Tensor<T>* d_h = nullptr) {
  const std::size_t dim = h.size();
  std::vector<T> mod(dim), d_mod(dim);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& e = pool.entry(i);
    const T alpha = composed.alphas[i];
    const T d_alpha = d_prompt.vector().dot(e.prompt.vector());
    for (std::size_t c = 0; c < dim; ++c) mod[c] = h[c] * e.attention[c];
    std::fill(d_mod.begin(), d_mod.end(), T{0});
    accumulate_cosine_grad<T>(mod, e.key.values(), d_alpha, d_mod);
    if (!e.frozen) {
      PoolGrads<T>::ensure(grads.prompts[i], e.prompt).vector() += alpha * d_prompt.vector();
      auto& ga = PoolGrads<T>::ensure(grads.attention[i], e.attention);
      for (std::size_t c = 0; c < dim; ++c) ga[c] += d_mod[c] * h[c];
      if (!e.key_frozen) {
        auto& gk = PoolGrads<T>::ensure(grads.keys[i], e.key);
        accumulate_cosine_grad<T>(e.key.values(), mod, d_alpha, gk.values());
      }
    }
    if (d_h)
      for (std::size_t c = 0; c < dim; ++c) (*d_h)[c] += d_mod[c] * e.attention[c];
  }
}

struct FreezePlan {
  std::vector<std::size_t> trainable;
  std::vector<std::size_t> frozen;
};

namespace detail {

template <class T>
Tensor<T> random_unit(std::size_t dim, Rng& rng) {
  Tensor<T> v({dim});
  fill_normal(v, rng, 1.0);
  normalize_inplace(v.values());
  return v;
}

/// Orthogonalizes `v` against every vector in `basis` (Gram-Schmidt), then
/// normalizes. Falls back to a fresh draw when `v` collapses.
template <class T>
Tensor<T> orthogonalized_unit(std::vector<const Tensor<T>*> basis, std::size_t dim, Rng& rng) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    Tensor<T> v = random_unit<T>(dim, rng);
    if (basis.size() < dim) {
      for (int pass = 0; pass < 2; ++pass)
        for (const Tensor<T>* b : basis) {
          const T n2 = b->vector().squaredNorm();
          if (n2 > T{0}) v.vector() -= (v.vector().dot(b->vector()) / n2) * b->vector();
        }
    }
    if (v.vector().norm() > T(1e-6)) {
      normalize_inplace(v.values());
      return v;
    }
  }
  return random_unit<T>(dim, rng);
}

template <class T>
PromptEntry<T> new_entry(const PromptPool<T>& pool, Rng& rng, int provenance) {
  PromptEntry<T> e;
  e.prompt = pool.new_prompt_tensor();
  const double bound = 1.0 / std::sqrt(double(pool.dim()));
  fill_uniform(e.prompt, rng, -bound, bound);
  e.key = random_unit<T>(pool.dim(), rng);
  e.provenance = provenance;
  return e;
}

}  // namespace detail

/// Grows and freezes the pool for timestep t >= 1 according to its strategy.
///  L2P   - one shared pool of `pool_size`, created at t=1, always trainable
///  SPP   - freeze everything, append one pair
///  CODA  - freeze everything, append `coda_prompts_per_task` entries with
///          Gram-Schmidt orthogonal keys and attention vectors
///  TOPIC - one prompt per topic key, created at t=1; keys fixed forever
template <class T>
FreezePlan allocate_for_timestep(PromptPool<T>& pool, int t, const PoolConfig& cfg,
                                 const Tensor<T>* topic_keys, Rng& rng) {
  PROMPTDSI_REQUIRE(t >= 1, ContractError, "prompt allocation starts at t=1");
  switch (pool.strategy()) {
    case PoolStrategy::kL2P:
      if (pool.empty())
        for (int i = 0; i < cfg.pool_size; ++i)
          pool.entries().push_back(detail::new_entry(pool, rng, t));
      break;
    case PoolStrategy::kSPP:
      for (auto& e : pool.entries()) e.frozen = true;
      pool.entries().push_back(detail::new_entry(pool, rng, t));
      break;
    case PoolStrategy::kCODA: {
      for (auto& e : pool.entries()) e.frozen = true;
      for (int i = 0; i < cfg.coda_prompts_per_task; ++i) {
        auto e = detail::new_entry(pool, rng, t);
        std::vector<const Tensor<T>*> keys, attn;
        for (const auto& old : pool.entries()) {
          keys.push_back(&old.key);
          attn.push_back(&old.attention);
        }
        e.key = detail::orthogonalized_unit<T>(keys, pool.dim(), rng);
        e.attention = detail::orthogonalized_unit<T>(attn, pool.dim(), rng);
        pool.entries().push_back(std::move(e));
      }
      break;
    }
    case PoolStrategy::kTopic:
      if (!topic_keys) throw ConfigError("TOPIC strategy requires a topic model");
      if (pool.empty()) {
        PROMPTDSI_REQUIRE(topic_keys->rank() == 2 && topic_keys->cols() == pool.dim(),
                          ConfigError, "topic keys must be G x dim");
        for (std::size_t g = 0; g < topic_keys->rows(); ++g) {
          auto e = detail::new_entry(pool, rng, int(g));
          auto src = topic_keys->row(g);
          e.key = Tensor<T>({pool.dim()}, std::vector<T>(src.begin(), src.end()));
          e.key_frozen = true;
          pool.entries().push_back(std::move(e));
        }
      } else if (cfg.topic_freeze_previous) {
        for (auto& e : pool.entries()) e.frozen = true;
      }
      break;
  }
  pool.mark_modified();
  FreezePlan plan;
  for (std::size_t i = 0; i < pool.size(); ++i)
    (pool.entry(i).frozen ? plan.frozen : plan.trainable).push_back(i);
  return plan;
}

// ---------------------------------------------------------------------------
// Utilization
// ---------------------------------------------------------------------------

template <class T>
struct SelectionLogEntry {
  int corpus = 0;
  std::string query_id;
  std::vector<std::size_t> prompt_ids;
  std::vector<T> distances;
};

struct UtilizationStats {
  std::size_t pool_size = 0;
  std::vector<int> corpora;                               // row labels
  std::vector<std::vector<std::size_t>> counts;           // [corpus][prompt]
  std::vector<std::size_t> queries_per_corpus;
  std::vector<std::vector<double>> frequency;             // counts / row total
  std::vector<double> overall_frequency;                  // per prompt
  std::size_t prompts_used = 0;                           // selected at least once
  std::size_t above_uniform = 0;                          // overall frequency > 1/M
  double used_fraction = 0.0;
  double above_uniform_fraction = 0.0;
  double concentration = 0.0;                             // max overall frequency
};

template <class T>
UtilizationStats utilization_stats(std::span<const SelectionLogEntry<T>> log,
                                   std::size_t pool_size) {
  UtilizationStats s;
  s.pool_size = pool_size;
  if (log.empty() || pool_size == 0) return s;
  std::map<int, std::size_t> row_of;
  for (const auto& e : log) row_of.emplace(e.corpus, 0);
  for (auto& [c, r] : row_of) {
    r = s.corpora.size();
    s.corpora.push_back(c);
  }
  s.counts.assign(s.corpora.size(), std::vector<std::size_t>(pool_size, 0));
  s.queries_per_corpus.assign(s.corpora.size(), 0);
  std::vector<std::size_t> total(pool_size, 0);
  std::size_t grand = 0;
  for (const auto& e : log) {
    const std::size_t r = row_of[e.corpus];
    ++s.queries_per_corpus[r];
    for (std::size_t id : e.prompt_ids) {
      PROMPTDSI_REQUIRE(id < pool_size, IndexError, "prompt id outside pool");
      ++s.counts[r][id];
      ++total[id];
      ++grand;
    }
  }
  for (const auto& row : s.counts) {
    std::size_t rt = 0;
    for (auto v : row) rt += v;
    std::vector<double> f(pool_size, 0.0);
    for (std::size_t i = 0; i < pool_size; ++i) f[i] = rt ? double(row[i]) / double(rt) : 0.0;
    s.frequency.push_back(std::move(f));
  }
  s.overall_frequency.assign(pool_size, 0.0);
  const double uniform = 1.0 / double(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) {
    s.overall_frequency[i] = grand ? double(total[i]) / double(grand) : 0.0;
    if (total[i] > 0) ++s.prompts_used;
    if (s.overall_frequency[i] > uniform + 1e-12) ++s.above_uniform;
    s.concentration = std::max(s.concentration, s.overall_frequency[i]);
  }
  s.used_fraction = double(s.prompts_used) / double(pool_size);
  s.above_uniform_fraction = double(s.above_uniform) / double(pool_size);
  return s;
}

}  // namespace promptdsi
