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

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptdsi/encoder.hpp"
#include "promptdsi/errors.hpp"
#include "promptdsi/numerics.hpp"
#include "promptdsi/prompts.hpp"
#include "promptdsi/retrieval.hpp"
#include "promptdsi/tensor.hpp"

namespace promptdsi {

/// Encoder + classifier head + optional prompt pool.
template <class T>
struct DsiModel {
  Encoder<T> encoder;
  Classifier<T> classifier;
  std::optional<PromptPool<T>> pool;

  bool prompting() const { return pool && !pool->empty(); }
  const EncoderConfig& config() const { return encoder.config(); }

  template <class U>
  DsiModel<U> cast() const {
    DsiModel<U> out;
    out.encoder = Encoder<U>(encoder.config(), encoder.weights().template cast<U>());
    out.classifier = classifier.template cast<U>();
    if (pool) out.pool = pool->template cast<U>();
    return out;
  }
};

/// Which tensors receive gradients in a step.
struct TrainableSet {
  bool encoder = false;
  std::vector<bool> segments;  // per classifier segment
  bool pool = false;           // unfrozen prompt entries (keys/attention per strategy)
  /// Restricts prompt selection during training (SPP trains only the pair of
  /// the current timestep). Empty means the whole pool.
  std::vector<std::size_t> selection_candidates;
};

template <class T>
struct ForwardPass {
  PackedBatch batch;
  std::vector<LayerCache<T>> layers;
  LayerNormCache<T> final_ln;
  Tensor<T> h;                    // B x dim, h_q per sequence
  Tensor<T> selection_embedding;  // B x dim, when prompting
  std::vector<SelectionResult<T>> selections;  // top-N strategies
  std::vector<ComposedPrompt<T>> composed;     // CODA
  std::vector<std::vector<Prefix<T>>> prefixes;  // [prompt layer slot][sequence]
};

template <class T>
PackedBatch pack(std::span<const std::vector<int>> seqs) {
  PackedBatch b;
  for (const auto& s : seqs) b.add(s);
  return b;
}

namespace detail {

template <class T>
void select_prompts(const DsiModel<T>& model, ForwardPass<T>& fp,
                    std::span<const std::size_t> candidates) {
  const auto& pool = *model.pool;
  const std::size_t B = fp.batch.size();
  const std::size_t slots = model.config().prompt_layers.size();
  fp.prefixes.assign(slots, std::vector<Prefix<T>>(B));
  const std::size_t dim = pool.dim();
  for (std::size_t b = 0; b < B; ++b) {
    auto row = fp.selection_embedding.row(b);
    Tensor<T> h({dim}, std::vector<T>(row.begin(), row.end()));
    if (pool.strategy() == PoolStrategy::kCODA) {
      fp.composed.push_back(coda_compose(h, pool));
      const auto& cp = fp.composed.back().prompt;
      const std::size_t m = pool.prompt_length(), half = m / 2;
      for (std::size_t s = 0; s < slots; ++s) {
        const T* src = cp.data() + s * m * dim;
        Prefix<T>& p = fp.prefixes[s][b];
        p.keys = Tensor<T>({half, dim}, std::vector<T>(src, src + half * dim));
        p.values = Tensor<T>({half, dim}, std::vector<T>(src + half * dim, src + m * dim));
      }
    } else {
      fp.selections.push_back(select_topN(h, pool, candidates));
      for (std::size_t s = 0; s < slots; ++s)
        fp.prefixes[s][b] = pool.prefix_from(fp.selections.back().ids, s);
    }
  }
}

}  // namespace detail

/// Forward pass over a packed batch. With a non-empty pool, prompts are
/// chosen per sequence either from a prompt-free first pass (two-pass) or
/// from the mean of the hidden state entering the first prompting layer
/// (single-pass, same pass).
template <class T>
ForwardPass<T> model_forward(const DsiModel<T>& model, PackedBatch batch, bool keep_cache,
                             std::span<const std::size_t> candidates = {}) {
  ForwardPass<T> fp;
  fp.batch = std::move(batch);
  const auto& enc = model.encoder;
  const auto& cfg = enc.config();
  const bool prompting = model.prompting() && !cfg.prompt_layers.empty();
  const std::size_t first = prompting ? std::size_t(cfg.first_prompt_layer() - 1) : 0;

  if (prompting && cfg.selection == SelectionMode::kTwoPassCls) {
    fp.selection_embedding = enc.forward_cls(fp.batch);
    detail::select_prompts(model, fp, candidates);
  }
  if (keep_cache) fp.layers.resize(std::size_t(cfg.num_layers));
  Tensor<T> x = enc.embed(fp.batch);
  for (std::size_t l = 0; l < std::size_t(cfg.num_layers); ++l) {
    if (prompting && l == first && cfg.selection == SelectionMode::kSinglePassAvg) {
      fp.selection_embedding = mean_per_sequence(x, fp.batch);
      detail::select_prompts(model, fp, candidates);
    }
    std::span<const Prefix<T>> pre;
    if (prompting && l >= first && l < first + cfg.prompt_layers.size())
      pre = fp.prefixes[l - first];
    x = enc.run_layer(l, x, fp.batch, pre, keep_cache ? &fp.layers[l] : nullptr);
  }
  fp.h = enc.final_cls(x, fp.batch, keep_cache ? &fp.final_ln : nullptr);
  return fp;
}

template <class T>
struct ModelGrads {
  std::optional<EncoderWeights<T>> encoder;
  std::vector<Tensor<T>> segments;  // empty tensor = not trainable
  PoolGrads<T> pool;
};

template <class T>
struct LossResult {
  T loss{0};
  T cross_entropy{0};
  T match{0};
  ModelGrads<T> grads;
  ForwardPass<T> forward;
};

/// Loss and gradients for one batch.
///   no prompts        : mean CE over every docid column
///   L2P / SPP         : mean CE + match_weight * mean L_match
///   CODA / TOPIC      : mean CE
/// Gradients are produced only for tensors in `trainable`.
template <class T>
LossResult<T> dsi_loss(const DsiModel<T>& model, std::span<const std::vector<int>> queries,
                       std::span<const int> targets, const TrainableSet& trainable,
                       double match_weight = 1.0, bool compute_grads = true) {
  PROMPTDSI_REQUIRE(queries.size() == targets.size() && !queries.empty(), ContractError,
                    "one target per query");
  for (int y : targets)
    if (y < 0 || std::size_t(y) >= model.classifier.total_docs())
      throw DataError("gold docid " + std::to_string(y) + " outside the registry");
  const auto& enc = model.encoder;
  const auto& cfg = enc.config();
  LossResult<T> out;
  out.forward = model_forward(model, pack<T>(queries), compute_grads,
                              trainable.selection_candidates);
  auto& fp = out.forward;
  const std::size_t B = fp.batch.size();

  Tensor<T> logits = model.classifier.logits(fp.h);
  auto ce = cross_entropy_logits<T>(logits, targets);
  out.cross_entropy = ce.loss;
  const bool prompting = model.prompting() && !cfg.prompt_layers.empty();
  const bool with_match = prompting && model.pool->uses_match_loss();
  if (with_match) {
    for (const auto& sel : fp.selections) out.match += sel.match_loss;
    out.match /= T(B);
  }
  out.loss = out.cross_entropy + (with_match ? T(match_weight) * out.match : T{0});
  if (!std::isfinite(double(out.loss))) throw NumericError("non-finite loss");
  if (!compute_grads) return out;

  auto& g = out.grads;
  const bool train_pool = prompting && trainable.pool;
  const bool single_pass = cfg.selection == SelectionMode::kSinglePassAvg;
  const bool need_sel_grad = prompting && trainable.encoder && single_pass;

  // Classifier.
  g.segments.resize(model.classifier.num_segments());
  Tensor<T> d_h({B, std::size_t(cfg.dim)});
  {
    const auto dl = ce.grad.matrix();
    Eigen::Index o = 0;
    for (std::size_t s = 0; s < model.classifier.num_segments(); ++s) {
      const auto& seg = model.classifier.segment(s);
      const Eigen::Index n = Eigen::Index(seg.rows());
      if (s < trainable.segments.size() && trainable.segments[s]) {
        g.segments[s] = Tensor<T>(seg.shape());
        g.segments[s].matrix().noalias() = dl.middleCols(o, n).transpose() * fp.h.matrix();
      }
      d_h.matrix().noalias() += dl.middleCols(o, n) * seg.matrix();
      o += n;
    }
  }

  const bool need_encoder_backward = trainable.encoder || train_pool;
  if (train_pool) g.pool = PoolGrads<T>(model.pool->size());
  Tensor<T> d_sel;
  if (need_sel_grad) d_sel = Tensor<T>(fp.selection_embedding.shape());

  // Match loss on keys (and on the selection embedding when it is differentiable).
  if (with_match && (train_pool || need_sel_grad)) {
    const T scale = T(match_weight) / T(B);
    for (std::size_t b = 0; b < B; ++b) {
      auto row = fp.selection_embedding.row(b);
      Tensor<T> h({row.size()}, std::vector<T>(row.begin(), row.end()));
      Tensor<T> dh_b({row.size()});
      std::vector<Tensor<T>> dummy(model.pool->size());
      auto& key_grads = train_pool ? g.pool.keys : dummy;
      match_loss_grad(h, *model.pool, fp.selections[b], scale, key_grads,
                      need_sel_grad ? &dh_b : nullptr);
      if (need_sel_grad)
        for (std::size_t c = 0; c < row.size(); ++c) d_sel.at(b, c) += dh_b[c];
    }
  }

  if (!need_encoder_backward) return out;

  if (trainable.encoder) g.encoder = EncoderWeights<T>::zeros(cfg);
  EncoderWeights<T>* eg = g.encoder ? &*g.encoder : nullptr;
  const std::size_t first = prompting ? std::size_t(cfg.first_prompt_layer() - 1) : 0;
  const std::size_t n_slots = prompting ? cfg.prompt_layers.size() : 0;
  std::vector<std::vector<Prefix<T>>> d_prefix(n_slots);

  Tensor<T> d_x = enc.backward_final_cls(d_h, fp.batch, fp.final_ln, eg);
  const std::size_t stop = trainable.encoder ? 0 : first;
  for (std::size_t l = std::size_t(cfg.num_layers); l-- > stop;) {
    const bool is_prompt_layer = prompting && l >= first && l < first + n_slots;
    d_x = enc.backward_layer(l, fp.layers[l], fp.batch, d_x, eg ? &eg->layers[l] : nullptr,
                             is_prompt_layer && train_pool ? &d_prefix[l - first] : nullptr);
    if (l == first && prompting && single_pass && (train_pool || need_sel_grad)) {
      // Selection depends on x entering layer `first`; CODA alphas are
      // differentiable in it, top-N selection contributes through L_match.
      if (model.pool->strategy() == PoolStrategy::kCODA) {
        const std::size_t m = model.pool->prompt_length(), half = m / 2;
        const std::size_t dim = std::size_t(cfg.dim);
        for (std::size_t b = 0; b < B; ++b) {
          Tensor<T> d_comp = model.pool->new_prompt_tensor();
          if (train_pool)
            for (std::size_t s = 0; s < n_slots; ++s) {
              const auto& dp = d_prefix[s][b];
              if (dp.empty()) continue;
              T* dst = d_comp.data() + s * m * dim;
              std::copy(dp.keys.data(), dp.keys.data() + half * dim, dst);
              std::copy(dp.values.data(), dp.values.data() + half * dim, dst + half * dim);
            }
          auto row = fp.selection_embedding.row(b);
          Tensor<T> h({row.size()}, std::vector<T>(row.begin(), row.end()));
          Tensor<T> dh_b({row.size()});
          PoolGrads<T> scratch(model.pool->size());
          coda_backward(h, *model.pool, fp.composed[b], d_comp,
                        train_pool ? g.pool : scratch, need_sel_grad ? &dh_b : nullptr);
          if (need_sel_grad)
            for (std::size_t c = 0; c < row.size(); ++c) d_sel.at(b, c) += dh_b[c];
        }
      }
      if (need_sel_grad) {
        for (std::size_t b = 0; b < B; ++b) {
          const T inv = T{1} / T(fp.batch.length(b));
          for (std::size_t p = 0; p < fp.batch.length(b); ++p) {
            auto dst = d_x.row(fp.batch.begin(b) + p);
            for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += d_sel.at(b, c) * inv;
          }
        }
      }
    }
  }
  if (eg) enc.backward_embed(fp.batch, d_x, *eg);

  // Prefix gradients back onto pool entries.
  if (train_pool) {
    const auto& pool = *model.pool;
    const std::size_t m = pool.prompt_length(), half = m / 2, dim = pool.dim();
    if (pool.strategy() == PoolStrategy::kCODA) {
      if (!single_pass) {
        for (std::size_t b = 0; b < B; ++b) {
          Tensor<T> d_comp = pool.new_prompt_tensor();
          for (std::size_t s = 0; s < n_slots; ++s) {
            const auto& dp = d_prefix[s][b];
            if (dp.empty()) continue;
            T* dst = d_comp.data() + s * m * dim;
            std::copy(dp.keys.data(), dp.keys.data() + half * dim, dst);
            std::copy(dp.values.data(), dp.values.data() + half * dim, dst + half * dim);
          }
          auto row = fp.selection_embedding.row(b);
          Tensor<T> h({row.size()}, std::vector<T>(row.begin(), row.end()));
          coda_backward<T>(h, pool, fp.composed[b], d_comp, g.pool, nullptr);
        }
      }
    } else {
      for (std::size_t b = 0; b < B; ++b) {
        const auto& ids = fp.selections[b].ids;
        for (std::size_t s = 0; s < n_slots; ++s) {
          const auto& dp = d_prefix[s][b];
          if (dp.empty()) continue;
          for (std::size_t j = 0; j < ids.size(); ++j) {
            const auto& e = pool.entry(ids[j]);
            if (e.frozen) continue;
            auto& gp = PoolGrads<T>::ensure(g.pool.prompts[ids[j]], e.prompt);
            T* dst = gp.data() + s * m * dim;
            const T* sk = dp.keys.data() + j * half * dim;
            const T* sv = dp.values.data() + j * half * dim;
            for (std::size_t i = 0; i < half * dim; ++i) {
              dst[i] += sk[i];
              dst[half * dim + i] += sv[i];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Named (value, gradient) pairs for every tensor that has a gradient.
template <class T>
std::vector<ParamRef<T>> collect_params(DsiModel<T>& model, ModelGrads<T>& g) {
  std::vector<ParamRef<T>> out;
  if (g.encoder) {
    std::vector<std::pair<std::string, Tensor<T>*>> vals, grads;
    model.encoder.weights().for_each(
        [&](const std::string& n, Tensor<T>& t) { vals.emplace_back(n, &t); });
    g.encoder->for_each([&](const std::string& n, Tensor<T>& t) { grads.emplace_back(n, &t); });
    for (std::size_t i = 0; i < vals.size(); ++i)
      out.push_back({"encoder." + vals[i].first, vals[i].second, grads[i].second});
  }
  for (std::size_t s = 0; s < g.segments.size(); ++s)
    if (!g.segments[s].empty()) {
      PROMPTDSI_REQUIRE(!model.classifier.frozen(s), ContractError,
                        "gradient produced for frozen classifier segment");
      out.push_back({"classifier.segment" + std::to_string(s), &model.classifier.segment(s),
                     &g.segments[s]});
    }
  if (model.pool) {
    auto& pool = *model.pool;
    for (std::size_t i = 0; i < g.pool.prompts.size(); ++i) {
      auto& e = pool.entry(i);
      const std::string base = "pool." + std::to_string(i) + ".";
      const bool any = !g.pool.prompts[i].empty() || !g.pool.keys[i].empty() ||
                       !g.pool.attention[i].empty();
      if (any)
        PROMPTDSI_REQUIRE(!e.frozen, ContractError, "gradient produced for frozen prompt " +
                                                        std::to_string(i));
      if (!g.pool.prompts[i].empty()) out.push_back({base + "prompt", &e.prompt, &g.pool.prompts[i]});
      if (!g.pool.keys[i].empty()) {
        PROMPTDSI_REQUIRE(!e.key_frozen, ContractError, "gradient produced for a fixed key");
        out.push_back({base + "key", &e.key, &g.pool.keys[i]});
      }
      if (!g.pool.attention[i].empty())
        out.push_back({base + "attention", &e.attention, &g.pool.attention[i]});
    }
  }
  return out;
}

/// h_q for a list of queries plus the selections (empty when not prompting).
template <class T>
ForwardPass<T> embed_queries(const DsiModel<T>& model, std::span<const std::vector<int>> queries) {
  return model_forward(model, pack<T>(queries), false);
}

}  // namespace promptdsi
