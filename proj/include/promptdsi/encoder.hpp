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
#include <atomic>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "promptdsi/errors.hpp"
#include "promptdsi/numerics.hpp"
#include "promptdsi/rng.hpp"
#include "promptdsi/tensor.hpp"

namespace promptdsi {

/// Vocabulary id of the summary token every sequence starts with.
inline constexpr int kClsToken = 0;

enum class SelectionMode {
  kTwoPassCls,     // prompt-free first pass, final-layer [CLS]
  kSinglePassAvg,  // mean of the layer feeding the first prompting layer
};

inline std::string to_string(SelectionMode m) {
  return m == SelectionMode::kTwoPassCls ? "two_pass_cls" : "single_pass_avg";
}

inline SelectionMode selection_mode_from_string(const std::string& s) {
  if (s == "two_pass_cls") return SelectionMode::kTwoPassCls;
  if (s == "single_pass_avg") return SelectionMode::kSinglePassAvg;
  throw ConfigError("unknown selection mode '" + s + "'");
}

struct EncoderConfig {
  int num_layers = 4;
  int dim = 64;
  int num_heads = 4;
  int ff_dim = 128;
  int max_seq_len = 16;
  int vocab_size = 1024;
  std::vector<int> prompt_layers{2};  // 1-based, contiguous
  SelectionMode selection = SelectionMode::kSinglePassAvg;

  int head_dim() const { return dim / num_heads; }

  /// First prompting layer (1-based); 0 when prompting is disabled.
  int first_prompt_layer() const {
    return prompt_layers.empty() ? 0 : prompt_layers.front();
  }

  void validate() const {
    PROMPTDSI_REQUIRE(num_layers >= 1 && dim >= 1 && num_heads >= 1 && ff_dim >= 1,
                      ConfigError, "encoder extents must be positive");
    PROMPTDSI_REQUIRE(dim % num_heads == 0, ConfigError,
                      "dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(num_heads) + " heads");
    PROMPTDSI_REQUIRE(max_seq_len >= 2, ConfigError, "max_seq_len must be >= 2");
    PROMPTDSI_REQUIRE(vocab_size >= 2, ConfigError, "vocab_size must be >= 2");
    for (std::size_t i = 0; i < prompt_layers.size(); ++i) {
      PROMPTDSI_REQUIRE(prompt_layers[i] >= 1 && prompt_layers[i] <= num_layers,
                        ConfigError, "prompting layer outside [1, L]");
      if (i > 0)
        PROMPTDSI_REQUIRE(prompt_layers[i] == prompt_layers[i - 1] + 1, ConfigError,
                          "prompting layers must be contiguous and ascending");
    }
  }
};

template <class T>
struct LayerWeights {
  Tensor<T> ln1_gamma, ln1_beta;
  // y = x W + b, W is dim x dim. Keys carry no bias: a shared offset on
  // every key shifts all logits of a query equally and cancels in softmax.
  Tensor<T> wq, bq, wk, wv, bv, wo, bo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("ln1_gamma", self.ln1_gamma);
    f("ln1_beta", self.ln1_beta);
    f("wq", self.wq);
    f("bq", self.bq);
    f("wk", self.wk);
    f("wv", self.wv);
    f("bv", self.bv);
    f("wo", self.wo);
    f("bo", self.bo);
    f("ln2_gamma", self.ln2_gamma);
    f("ln2_beta", self.ln2_beta);
    f("w1", self.w1);
    f("b1", self.b1);
    f("w2", self.w2);
    f("b2", self.b2);
  }
};

template <class T>
struct EncoderWeights {
  Tensor<T> token_embedding;     // vocab x dim
  Tensor<T> position_embedding;  // max_seq_len x dim
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_gamma, final_beta;

  /// Correctly shaped, all zeros (layer-norm scales included). Used as the
  /// gradient accumulator layout.
  static EncoderWeights zeros(const EncoderConfig& cfg) {
    const std::size_t d = std::size_t(cfg.dim), ff = std::size_t(cfg.ff_dim);
    EncoderWeights w;
    w.token_embedding = Tensor<T>({std::size_t(cfg.vocab_size), d});
    w.position_embedding = Tensor<T>({std::size_t(cfg.max_seq_len), d});
    w.layers.resize(std::size_t(cfg.num_layers));
    for (auto& l : w.layers) {
      l.ln1_gamma = Tensor<T>({d});
      l.ln1_beta = Tensor<T>({d});
      l.wq = Tensor<T>({d, d});
      l.bq = Tensor<T>({d});
      l.wk = Tensor<T>({d, d});
      l.wv = Tensor<T>({d, d});
      l.bv = Tensor<T>({d});
      l.wo = Tensor<T>({d, d});
      l.bo = Tensor<T>({d});
      l.ln2_gamma = Tensor<T>({d});
      l.ln2_beta = Tensor<T>({d});
      l.w1 = Tensor<T>({d, ff});
      l.b1 = Tensor<T>({ff});
      l.w2 = Tensor<T>({ff, d});
      l.b2 = Tensor<T>({d});
    }
    w.final_gamma = Tensor<T>({d});
    w.final_beta = Tensor<T>({d});
    return w;
  }

  /// Normal(0, 0.02) matrices and embeddings, unit layer-norm scales.
  static EncoderWeights init(const EncoderConfig& cfg, Rng& rng, double stddev = 0.02) {
    EncoderWeights w = zeros(cfg);
    fill_normal(w.token_embedding, rng, stddev);
    fill_normal(w.position_embedding, rng, stddev);
    for (auto& l : w.layers) {
      l.ln1_gamma.fill(T{1});
      l.ln2_gamma.fill(T{1});
      for (Tensor<T>* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2})
        fill_normal(*m, rng, stddev);
    }
    w.final_gamma.fill(T{1});
    return w;
  }

  template <class F>
  void for_each(F&& f) {
    visit_all(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit_all(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  std::uint64_t digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each([&](const std::string& name, const Tensor<T>& t) {
      h = promptdsi::digest(t, fnv1a(name, h));
    });
    return h;
  }

  template <class U>
  EncoderWeights<U> cast() const {
    EncoderWeights<U> out;
    out.token_embedding = token_embedding.template cast<U>();
    out.position_embedding = position_embedding.template cast<U>();
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& dst = out.layers[i];
      const auto& src = layers[i];
      dst.ln1_gamma = src.ln1_gamma.template cast<U>();
      dst.ln1_beta = src.ln1_beta.template cast<U>();
      dst.wq = src.wq.template cast<U>();
      dst.bq = src.bq.template cast<U>();
      dst.wk = src.wk.template cast<U>();
      dst.wv = src.wv.template cast<U>();
      dst.bv = src.bv.template cast<U>();
      dst.wo = src.wo.template cast<U>();
      dst.bo = src.bo.template cast<U>();
      dst.ln2_gamma = src.ln2_gamma.template cast<U>();
      dst.ln2_beta = src.ln2_beta.template cast<U>();
      dst.w1 = src.w1.template cast<U>();
      dst.b1 = src.b1.template cast<U>();
      dst.w2 = src.w2.template cast<U>();
      dst.b2 = src.b2.template cast<U>();
    }
    out.final_gamma = final_gamma.template cast<U>();
    out.final_beta = final_beta.template cast<U>();
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_all(Self& self, F& f) {
    f(std::string("embed.token"), self.token_embedding);
    f(std::string("embed.position"), self.position_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i + 1) + ".";
      LayerWeights<T>::visit(self.layers[i],
                             [&](const char* n, auto& t) { f(prefix + n, t); });
    }
    f(std::string("final.gamma"), self.final_gamma);
    f(std::string("final.beta"), self.final_beta);
  }
};

/// Variable-length sequences packed row-wise into one token matrix.
struct PackedBatch {
  std::vector<int> tokens;
  std::vector<std::size_t> offsets{0};

  std::size_t size() const { return offsets.size() - 1; }
  std::size_t total_tokens() const { return tokens.size(); }
  std::size_t begin(std::size_t b) const { return offsets[b]; }
  std::size_t length(std::size_t b) const { return offsets[b + 1] - offsets[b]; }

  void add(std::span<const int> seq) {
    tokens.insert(tokens.end(), seq.begin(), seq.end());
    offsets.push_back(tokens.size());
  }
};

/// Virtual key/value tokens for one sequence at one layer, in embedding
/// space (pre-projection). An empty prefix disables prompting.
template <class T>
struct Prefix {
  Tensor<T> keys;    // (m/2) x dim
  Tensor<T> values;  // (m/2) x dim
  std::size_t length() const { return keys.rows(); }
  bool empty() const { return keys.empty(); }
};

template <class T>
struct AttentionCache {
  RowMatrix<T> keys;    // projected [prefix; x] keys
  RowMatrix<T> values;  // projected [prefix; x] values
  std::vector<RowMatrix<T>> probs;  // one (n x (m/2+n)) matrix per head
};

template <class T>
struct LayerCache {
  LayerNormCache<T> ln1;
  Tensor<T> ln1_out;
  Tensor<T> q;
  std::vector<AttentionCache<T>> attention;  // per sequence
  std::vector<const Prefix<T>*> prefixes;    // per sequence, may be null
  Tensor<T> ctx;
  LayerNormCache<T> ln2;
  Tensor<T> ln2_out;
  Tensor<T> ff_pre, ff_act;
};

namespace detail {

template <class T>
void add_bias_rows(RowMatrix<T>& m, const Tensor<T>& bias) {
  m.rowwise() += bias.vector().transpose();
}

template <class T>
void add_colsum(Tensor<T>& acc, const RowMatrix<T>& m) {
  acc.vector() += m.colwise().sum().transpose();
}

/// Multi-head scaled dot-product attention of queries over `keys`/`values`
/// (no mask). Writes the context rows for this sequence into `ctx`.
template <class T, class QBlock, class CtxBlock>
void attend(const QBlock& q, AttentionCache<T>& cache, int heads, CtxBlock ctx) {
  const Eigen::Index dh = q.cols() / heads;
  const T scale = T{1} / std::sqrt(T(dh));
  cache.probs.resize(std::size_t(heads));
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index c0 = h * dh;
    RowMatrix<T> s = (q.middleCols(c0, dh) * cache.keys.middleCols(c0, dh).transpose()) * scale;
    for (Eigen::Index r = 0; r < s.rows(); ++r)
      softmax_inplace(std::span<T>(s.data() + r * s.cols(), std::size_t(s.cols())));
    ctx.middleCols(c0, dh).noalias() = s * cache.values.middleCols(c0, dh);
    cache.probs[std::size_t(h)] = std::move(s);
  }
}

template <class T, class QBlock, class DCtxBlock>
void attend_backward(const QBlock& q, const AttentionCache<T>& cache, int heads,
                     const DCtxBlock& d_ctx, RowMatrix<T>& d_q, RowMatrix<T>& d_keys,
                     RowMatrix<T>& d_values) {
  const Eigen::Index dh = q.cols() / heads;
  const T scale = T{1} / std::sqrt(T(dh));
  d_q.setZero(q.rows(), q.cols());
  d_keys.setZero(cache.keys.rows(), cache.keys.cols());
  d_values.setZero(cache.values.rows(), cache.values.cols());
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index c0 = h * dh;
    const auto& p = cache.probs[std::size_t(h)];
    RowMatrix<T> dp = d_ctx.middleCols(c0, dh) * cache.values.middleCols(c0, dh).transpose();
    d_values.middleCols(c0, dh).noalias() = p.transpose() * d_ctx.middleCols(c0, dh);
    Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (dp.array() * p.array()).rowwise().sum();
    RowMatrix<T> ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
    d_q.middleCols(c0, dh).noalias() = ds * cache.keys.middleCols(c0, dh);
    d_keys.middleCols(c0, dh).noalias() = ds.transpose() * q.middleCols(c0, dh);
  }
}

}  // namespace detail

/// Standalone prefix attention on one sequence x (n x dim):
///   Attention(x Wq, [p_k; x] Wk, [p_v; x] Wv) Wo
/// Queries come only from x, so the output always has n rows.
template <class T>
Tensor<T> attention_with_prefix(const Tensor<T>& x, const Prefix<T>& prefix,
                                const LayerWeights<T>& w, int num_heads) {
  const std::size_t dim = x.cols();
  PROMPTDSI_REQUIRE(num_heads >= 1 && dim % std::size_t(num_heads) == 0, ConfigError,
                    "dim not divisible by heads");
  PROMPTDSI_REQUIRE(prefix.keys.rows() == prefix.values.rows(), ContractError,
                    "p_k and p_v must have equal length");
  RowMatrix<T> q = x.matrix() * w.wq.matrix();
  detail::add_bias_rows(q, w.bq);
  const Eigen::Index n = Eigen::Index(x.rows());
  const Eigen::Index mp = Eigen::Index(prefix.length());
  AttentionCache<T> cache;
  cache.keys.resize(mp + n, Eigen::Index(dim));
  cache.values.resize(mp + n, Eigen::Index(dim));
  if (mp > 0) {
    cache.keys.topRows(mp) = prefix.keys.matrix() * w.wk.matrix();
    cache.values.topRows(mp) = prefix.values.matrix() * w.wv.matrix();
  }
  cache.keys.bottomRows(n) = x.matrix() * w.wk.matrix();
  cache.values.bottomRows(n) = x.matrix() * w.wv.matrix();
  cache.values.rowwise() += w.bv.vector().transpose();
  RowMatrix<T> ctx(n, Eigen::Index(dim));
  detail::attend<T>(q, cache, num_heads, ctx.leftCols(Eigen::Index(dim)));
  RowMatrix<T> out = ctx * w.wo.matrix();
  detail::add_bias_rows(out, w.bo);
  return from_matrix<T>(out);
}

/// Copyable wrapper around an atomic counter.
class InvocationCounter {
 public:
  InvocationCounter() = default;
  InvocationCounter(const InvocationCounter& o) : value_(o.value_.load()) {}
  InvocationCounter& operator=(const InvocationCounter& o) {
    value_.store(o.value_.load());
    return *this;
  }
  void add(std::uint64_t n) const { value_.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t value() const { return value_.load(); }
  void reset() const { value_.store(0); }

 private:
  mutable std::atomic<std::uint64_t> value_{0};
};

/// Pre-layer-norm transformer encoder with per-sequence prefix injection.
///
/// The forward pass is exposed in stages (embed, run_layer, final_cls) so a
/// caller can read the hidden state feeding a prompting layer and choose the
/// prefixes for that layer within the same pass.
template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderConfig cfg, EncoderWeights<T> weights)
      : cfg_(std::move(cfg)), weights_(std::move(weights)) {
    cfg_.validate();
  }

  const EncoderConfig& config() const { return cfg_; }
  EncoderConfig& mutable_config() { return cfg_; }
  const EncoderWeights<T>& weights() const { return weights_; }
  EncoderWeights<T>& weights() { return weights_; }

  /// Layer applications, counted once per sequence per layer.
  std::uint64_t layer_invocations() const { return counter_.value(); }
  void reset_invocations() const { counter_.reset(); }

  void validate_sequence(std::span<const int> seq) const {
    if (seq.empty() || seq.front() != kClsToken)
      throw DataError("sequence must begin with the [CLS] token");
    if (seq.size() > std::size_t(cfg_.max_seq_len))
      throw DataError("sequence of length " + std::to_string(seq.size()) +
                      " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    for (int tok : seq)
      if (tok < 0 || tok >= cfg_.vocab_size)
        throw VocabularyError("unknown token id " + std::to_string(tok));
  }

  /// Token plus position embeddings, one row per packed token.
  Tensor<T> embed(const PackedBatch& batch) const {
    const std::size_t d = std::size_t(cfg_.dim);
    Tensor<T> x({batch.total_tokens(), d});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::span<const int> seq(batch.tokens.data() + batch.begin(b), batch.length(b));
      validate_sequence(seq);
      for (std::size_t p = 0; p < seq.size(); ++p) {
        auto dst = x.row(batch.begin(b) + p);
        auto te = weights_.token_embedding.row(std::size_t(seq[p]));
        auto pe = weights_.position_embedding.row(p);
        for (std::size_t c = 0; c < d; ++c) dst[c] = te[c] + pe[c];
      }
    }
    return x;
  }

  /// Applies block `layer` (0-based). `prefixes` is either empty (no
  /// prompting) or holds one entry per sequence.
  Tensor<T> run_layer(std::size_t layer, const Tensor<T>& x, const PackedBatch& batch,
                      std::span<const Prefix<T>> prefixes, LayerCache<T>* cache) const {
    PROMPTDSI_REQUIRE(prefixes.empty() || prefixes.size() == batch.size(), ContractError,
                      "one prefix per sequence");
    const auto& w = weights_.layers.at(layer);
    const Eigen::Index d = cfg_.dim;
    LayerCache<T> local;
    LayerCache<T>& c = cache ? *cache : local;

    c.ln1_out = layer_norm_forward(x, w.ln1_gamma, w.ln1_beta, &c.ln1);
    const auto a = c.ln1_out.matrix();
    RowMatrix<T> q = a * w.wq.matrix();
    detail::add_bias_rows(q, w.bq);
    RowMatrix<T> kx = a * w.wk.matrix();
    RowMatrix<T> vx = a * w.wv.matrix();
    detail::add_bias_rows(vx, w.bv);

    RowMatrix<T> ctx(q.rows(), d);
    c.attention.assign(batch.size(), {});
    c.prefixes.assign(batch.size(), nullptr);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Eigen::Index o = Eigen::Index(batch.begin(b));
      const Eigen::Index n = Eigen::Index(batch.length(b));
      const Prefix<T>* pre = prefixes.empty() ? nullptr : &prefixes[b];
      const Eigen::Index mp = pre ? Eigen::Index(pre->length()) : 0;
      auto& ac = c.attention[b];
      ac.keys.resize(mp + n, d);
      ac.values.resize(mp + n, d);
      if (mp > 0) {
        PROMPTDSI_REQUIRE(pre->values.rows() == pre->keys.rows() &&
                              pre->keys.cols() == std::size_t(d),
                          ContractError, "malformed prefix");
        ac.keys.topRows(mp) = pre->keys.matrix() * w.wk.matrix();
        ac.values.topRows(mp) = pre->values.matrix() * w.wv.matrix();
        ac.values.topRows(mp).rowwise() += w.bv.vector().transpose();
        c.prefixes[b] = pre;
      }
      ac.keys.bottomRows(n) = kx.middleRows(o, n);
      ac.values.bottomRows(n) = vx.middleRows(o, n);
      detail::attend<T>(q.middleRows(o, n), ac, cfg_.num_heads, ctx.middleRows(o, n));
    }

    RowMatrix<T> h = x.matrix() + ctx * w.wo.matrix();
    detail::add_bias_rows(h, w.bo);
    Tensor<T> h_t = from_matrix<T>(h);
    c.ln2_out = layer_norm_forward(h_t, w.ln2_gamma, w.ln2_beta, &c.ln2);
    RowMatrix<T> u = c.ln2_out.matrix() * w.w1.matrix();
    detail::add_bias_rows(u, w.b1);
    RowMatrix<T> g = u.unaryExpr([](T v) { return gelu(v); });
    RowMatrix<T> out = h + g * w.w2.matrix();
    detail::add_bias_rows(out, w.b2);

    if (cache) {
      c.q = from_matrix<T>(q);
      c.ctx = from_matrix<T>(ctx);
      c.ff_pre = from_matrix<T>(u);
      c.ff_act = from_matrix<T>(g);
    }
    counter_.add(batch.size());
    return from_matrix<T>(out);
  }

  /// Final layer norm applied to each sequence's position-0 row: h_q.
  Tensor<T> final_cls(const Tensor<T>& x, const PackedBatch& batch,
                      LayerNormCache<T>* cache) const {
    const std::size_t d = std::size_t(cfg_.dim);
    Tensor<T> cls({batch.size(), d});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto src = x.row(batch.begin(b));
      std::copy(src.begin(), src.end(), cls.row(b).begin());
    }
    return layer_norm_forward(cls, weights_.final_gamma, weights_.final_beta, cache);
  }

  /// Full forward without prompting; returns h_q per sequence.
  Tensor<T> forward_cls(const PackedBatch& batch) const {
    Tensor<T> x = embed(batch);
    for (std::size_t l = 0; l < weights_.layers.size(); ++l)
      x = run_layer(l, x, batch, {}, nullptr);
    return final_cls(x, batch, nullptr);
  }

  // ---- backward ---------------------------------------------------------

  /// Scatters d h_q back onto the packed rows of the last hidden state.
  Tensor<T> backward_final_cls(const Tensor<T>& d_cls, const PackedBatch& batch,
                               const LayerNormCache<T>& cache,
                               EncoderWeights<T>* grads) const {
    Tensor<T> d_rows = layer_norm_backward(d_cls, weights_.final_gamma, cache,
                                           grads ? &grads->final_gamma : nullptr,
                                           grads ? &grads->final_beta : nullptr);
    Tensor<T> d_x({batch.total_tokens(), std::size_t(cfg_.dim)});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto src = d_rows.row(b);
      std::copy(src.begin(), src.end(), d_x.row(batch.begin(b)).begin());
    }
    return d_x;
  }

  /// Backward through block `layer`. Parameter gradients are accumulated
  /// only when `grads` is set; prefix gradients only when `d_prefix` is set.
  Tensor<T> backward_layer(std::size_t layer, const LayerCache<T>& c,
                           const PackedBatch& batch, const Tensor<T>& d_out,
                           LayerWeights<T>* grads,
                           std::vector<Prefix<T>>* d_prefix) const {
    const auto& w = weights_.layers.at(layer);
    const Eigen::Index d = cfg_.dim;
    const auto dout = d_out.matrix();

    // Feed-forward branch.
    RowMatrix<T> dg = dout * w.w2.matrix().transpose();
    const auto u = c.ff_pre.matrix();
    RowMatrix<T> du = (dg.array() * u.unaryExpr([](T v) { return gelu_grad(v); }).array()).matrix();
    if (grads) {
      grads->w2.matrix().noalias() += c.ff_act.matrix().transpose() * dout;
      grads->b2.vector() += dout.colwise().sum().transpose();
      grads->w1.matrix().noalias() += c.ln2_out.matrix().transpose() * du;
      detail::add_colsum(grads->b1, du);
    }
    Tensor<T> d_ln2 = from_matrix<T>(du * w.w1.matrix().transpose());
    Tensor<T> d_h_ln = layer_norm_backward(d_ln2, w.ln2_gamma, c.ln2,
                                           grads ? &grads->ln2_gamma : nullptr,
                                           grads ? &grads->ln2_beta : nullptr);
    RowMatrix<T> dh = dout + d_h_ln.matrix();

    // Attention branch.
    if (grads) {
      grads->wo.matrix().noalias() += c.ctx.matrix().transpose() * dh;
      detail::add_colsum(grads->bo, dh);
    }
    RowMatrix<T> dctx = dh * w.wo.matrix().transpose();
    RowMatrix<T> dq(dh.rows(), d), dkx(dh.rows(), d), dvx(dh.rows(), d);
    if (d_prefix) d_prefix->assign(batch.size(), {});
    const auto qm = c.q.matrix();
    RowMatrix<T> dq_s, dk_s, dv_s;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Eigen::Index o = Eigen::Index(batch.begin(b));
      const Eigen::Index n = Eigen::Index(batch.length(b));
      const auto& ac = c.attention[b];
      const Eigen::Index mp = ac.keys.rows() - n;
      detail::attend_backward<T>(qm.middleRows(o, n), ac, cfg_.num_heads,
                                 dctx.middleRows(o, n), dq_s, dk_s, dv_s);
      dq.middleRows(o, n) = dq_s;
      dkx.middleRows(o, n) = dk_s.bottomRows(n);
      dvx.middleRows(o, n) = dv_s.bottomRows(n);
      if (mp > 0) {
        const Prefix<T>* pre = c.prefixes[b];
        if (grads) {
          grads->wk.matrix().noalias() += pre->keys.matrix().transpose() * dk_s.topRows(mp);
          grads->wv.matrix().noalias() += pre->values.matrix().transpose() * dv_s.topRows(mp);
          grads->bv.vector() += dv_s.topRows(mp).colwise().sum().transpose();
        }
        if (d_prefix) {
          auto& dp = (*d_prefix)[b];
          dp.keys = from_matrix<T>(dk_s.topRows(mp) * w.wk.matrix().transpose());
          dp.values = from_matrix<T>(dv_s.topRows(mp) * w.wv.matrix().transpose());
        }
      }
    }
    const auto a = c.ln1_out.matrix();
    if (grads) {
      grads->wq.matrix().noalias() += a.transpose() * dq;
      detail::add_colsum(grads->bq, dq);
      grads->wk.matrix().noalias() += a.transpose() * dkx;
      grads->wv.matrix().noalias() += a.transpose() * dvx;
      detail::add_colsum(grads->bv, dvx);
    }
    RowMatrix<T> da = dq * w.wq.matrix().transpose();
    da.noalias() += dkx * w.wk.matrix().transpose();
    da.noalias() += dvx * w.wv.matrix().transpose();
    Tensor<T> d_x_ln = layer_norm_backward(from_matrix<T>(da), w.ln1_gamma, c.ln1,
                                           grads ? &grads->ln1_gamma : nullptr,
                                           grads ? &grads->ln1_beta : nullptr);
    return from_matrix<T>(dh + d_x_ln.matrix());
  }

  void backward_embed(const PackedBatch& batch, const Tensor<T>& d_x,
                      EncoderWeights<T>& grads) const {
    const std::size_t d = std::size_t(cfg_.dim);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (std::size_t p = 0; p < batch.length(b); ++p) {
        const std::size_t r = batch.begin(b) + p;
        auto g = d_x.row(r);
        auto te = grads.token_embedding.row(std::size_t(batch.tokens[r]));
        auto pe = grads.position_embedding.row(p);
        for (std::size_t c = 0; c < d; ++c) {
          te[c] += g[c];
          pe[c] += g[c];
        }
      }
    }
  }

 private:
  EncoderConfig cfg_;
  EncoderWeights<T> weights_;
  InvocationCounter counter_;
};

/// Mean of each sequence's rows of a packed hidden state.
template <class T>
Tensor<T> mean_per_sequence(const Tensor<T>& x, const PackedBatch& batch) {
  Tensor<T> out({batch.size(), x.cols()});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto dst = out.row(b);
    const T inv = T{1} / T(batch.length(b));
    for (std::size_t p = 0; p < batch.length(b); ++p) {
      auto src = x.row(batch.begin(b) + p);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c] * inv;
    }
  }
  return out;
}

template <class T>
struct EncoderOutput {
  std::vector<Tensor<T>> hidden;  // hidden[0] = embeddings, hidden[l] = layer l output
  Tensor<T> h_q;                  // final-layer [CLS] after the final layer norm
};

/// Single-sequence forward. `prefix_by_layer` maps 1-based layer index to the
/// prefix injected there.
template <class T>
EncoderOutput<T> encoder_forward(const Encoder<T>& enc, std::span<const int> tokens,
                                 const std::map<int, Prefix<T>>& prefix_by_layer = {}) {
  PackedBatch batch;
  batch.add(tokens);
  EncoderOutput<T> out;
  Tensor<T> x = enc.embed(batch);
  out.hidden.push_back(x);
  for (std::size_t l = 0; l < enc.weights().layers.size(); ++l) {
    auto it = prefix_by_layer.find(int(l) + 1);
    if (it != prefix_by_layer.end())
      x = enc.run_layer(l, x, batch, std::span<const Prefix<T>>(&it->second, 1), nullptr);
    else
      x = enc.run_layer(l, x, batch, {}, nullptr);
    out.hidden.push_back(x);
  }
  Tensor<T> cls = enc.final_cls(x, batch, nullptr);
  out.h_q = Tensor<T>({cls.cols()}, cls.storage());
  return out;
}

/// [AVG] for prompting layer `layer` (1-based): mean over positions of the
/// layer (layer-1) output, or of the embedding output when layer == 1.
template <class T>
Tensor<T> avg_at_layer(const Encoder<T>& enc, std::span<const int> tokens, int layer) {
  PROMPTDSI_REQUIRE(layer >= 1 && layer <= enc.config().num_layers, ConfigError,
                    "layer outside [1, L]");
  PackedBatch batch;
  batch.add(tokens);
  Tensor<T> x = enc.embed(batch);
  for (int l = 0; l < layer - 1; ++l) x = enc.run_layer(std::size_t(l), x, batch, {}, nullptr);
  Tensor<T> m = mean_per_sequence(x, batch);
  return Tensor<T>({m.cols()}, m.storage());
}

}  // namespace promptdsi
