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
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "promptdsi/errors.hpp"
#include "promptdsi/rng.hpp"
#include "promptdsi/tensor.hpp"

namespace promptdsi {

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  PROMPTDSI_REQUIRE(a.size() == b.size(), ContractError, "length mismatch");
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T l2_norm(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

/// 1 - cos(u, v), in [0, 2].
template <class T>
T cosine_distance(std::span<const T> u, std::span<const T> v) {
  const T nu = l2_norm(u), nv = l2_norm(v);
  PROMPTDSI_REQUIRE(nu > T{0} && nv > T{0}, DomainError, "zero-norm input");
  return T{1} - dot(u, v) / (nu * nv);
}

/// Gradient of cos(u, v) with respect to u, accumulated into `out` scaled by
/// `scale`. d cos / du = v / (|u||v|) - cos * u / |u|^2.
template <class T>
void accumulate_cosine_grad(std::span<const T> u, std::span<const T> v, T scale,
                            std::span<T> out) {
  const T nu = l2_norm(u), nv = l2_norm(v);
  PROMPTDSI_REQUIRE(nu > T{0} && nv > T{0}, DomainError, "zero-norm input");
  const T c = dot(u, v) / (nu * nv);
  for (std::size_t i = 0; i < u.size(); ++i)
    out[i] += scale * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
}

template <class T>
void normalize_inplace(std::span<T> v) {
  const T n = l2_norm(std::span<const T>(v));
  PROMPTDSI_REQUIRE(n > T{0}, DomainError, "cannot normalize a zero vector");
  for (auto& x : v) x /= n;
}

// ---------------------------------------------------------------------------
// Softmax and cross entropy
// ---------------------------------------------------------------------------

template <class T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  T sum{0};
  for (auto& x : row) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : row) x /= sum;
}

template <class T>
struct CrossEntropyResult {
  T loss{0};
  Tensor<T> grad;  // d loss / d logits, same shape as logits
};

/// Mean over the batch of -log softmax(logits_b)[target_b].
template <class T>
CrossEntropyResult<T> cross_entropy_logits(const Tensor<T>& logits,
                                           std::span<const int> targets) {
  PROMPTDSI_REQUIRE(logits.rank() == 2, ContractError, "logits must be B x C");
  const std::size_t batch = logits.rows(), classes = logits.cols();
  PROMPTDSI_REQUIRE(batch >= 1, ContractError, "empty batch");
  PROMPTDSI_REQUIRE(targets.size() == batch, ContractError, "one target per row");
  PROMPTDSI_REQUIRE(logits.all_finite(), NumericError, "non-finite logits");

  CrossEntropyResult<T> out{T{0}, Tensor<T>(logits.shape())};
  const T inv_b = T{1} / T(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = targets[b];
    if (y < 0 || std::size_t(y) >= classes)
      throw IndexError("cross_entropy_logits: target id " + std::to_string(y) +
                       " outside [0, " + std::to_string(classes) + ")");
    auto in = logits.row(b);
    auto g = out.grad.row(b);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum{0};
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(in[c] - mx);
    const T log_z = mx + std::log(sum);
    out.loss += (log_z - in[std::size_t(y)]) * inv_b;
    for (std::size_t c = 0; c < classes; ++c) g[c] = std::exp(in[c] - log_z) * inv_b;
    g[std::size_t(y)] -= inv_b;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations and layer norm
// ---------------------------------------------------------------------------

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer norm. Keeps the normalized rows and reciprocal std for the
/// backward pass.
template <class T>
struct LayerNormCache {
  Tensor<T> normalized;
  std::vector<T> rstd;
};

template <class T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                             const Tensor<T>& beta, LayerNormCache<T>* cache) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor<T> out(x.shape());
  Tensor<T> hat(x.shape());
  std::vector<T> rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto in = x.row(r);
    T mean{0};
    for (T v : in) mean += v;
    mean /= T(d);
    T var{0};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= T(d);
    const T rs = T{1} / std::sqrt(var + T(kLayerNormEps));
    rstd[r] = rs;
    auto h = hat.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      h[c] = (in[c] - mean) * rs;
      o[c] = h[c] * gamma[c] + beta[c];
    }
  }
  if (cache) {
    cache->normalized = std::move(hat);
    cache->rstd = std::move(rstd);
  }
  return out;
}

/// Returns d input; accumulates d gamma / d beta when the pointers are set.
template <class T>
Tensor<T> layer_norm_backward(const Tensor<T>& d_out, const Tensor<T>& gamma,
                              const LayerNormCache<T>& cache, Tensor<T>* d_gamma,
                              Tensor<T>* d_beta) {
  const std::size_t n = d_out.rows(), d = d_out.cols();
  Tensor<T> d_in(d_out.shape());
  std::vector<T> dh(d);
  for (std::size_t r = 0; r < n; ++r) {
    auto go = d_out.row(r);
    auto h = cache.normalized.row(r);
    T sum_dh{0}, sum_dh_h{0};
    for (std::size_t c = 0; c < d; ++c) {
      dh[c] = go[c] * gamma[c];
      sum_dh += dh[c];
      sum_dh_h += dh[c] * h[c];
      if (d_gamma) (*d_gamma)[c] += go[c] * h[c];
      if (d_beta) (*d_beta)[c] += go[c];
    }
    auto gi = d_in.row(r);
    const T inv_d = T{1} / T(d);
    for (std::size_t c = 0; c < d; ++c)
      gi[c] = cache.rstd[r] * (dh[c] - inv_d * sum_dh - h[c] * inv_d * sum_dh_h);
  }
  return d_in;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// A named parameter with its gradient buffer. Only trainable tensors are
/// ever handed to the optimizer.
template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  const Tensor<T>* grad = nullptr;
};

template <class T>
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> moments;  // (m, v)
};

/// Decoupled weight decay:
///   m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
///   p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
template <class T>
void adamw_step(std::span<const ParamRef<T>> params, OptimizerState<T>& state) {
  for (const auto& p : params)
    PROMPTDSI_REQUIRE(p.value && p.grad && p.value->shape() == p.grad->shape(),
                      ContractError, "shape mismatch for parameter " + p.name);
  const auto& cfg = state.config;
  ++state.step;
  const double t = double(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& p : params) {
    auto it = state.moments.find(p.name);
    if (it == state.moments.end())
      it = state.moments
               .emplace(p.name, std::pair{Tensor<T>(p.value->shape()),
                                          Tensor<T>(p.value->shape())})
               .first;
    auto& [m, v] = it->second;
    PROMPTDSI_REQUIRE(m.shape() == p.value->shape(), ContractError,
                      "moment shape drifted for " + p.name);
    T* w = p.value->data();
    const T* g = p.grad->data();
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const double gi = double(g[i]);
      const double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = T(mi);
      v[i] = T(vi);
      const double m_hat = bc1 > 0 ? mi / bc1 : mi;
      const double v_hat = bc2 > 0 ? vi / bc2 : vi;
      const double denom = std::sqrt(v_hat) + cfg.epsilon;
      const double adam = denom > 0 ? m_hat / denom : 0.0;
      w[i] = T(double(w[i]) - cfg.learning_rate * (adam + cfg.weight_decay * double(w[i])));
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

template <class T>
struct GradCheckEntry {
  std::string name;
  const Tensor<T>* analytic = nullptr;
  Tensor<T>* value = nullptr;
};

struct GradCheckTensorReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckTensorReport> tensors;
  double max_rel_error = 0.0;
  bool passed(double tol) const { return max_rel_error < tol; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central differences on up to `max_samples` uniformly chosen entries per
/// tensor (fixed seed). `f` must re-evaluate the loss from the current values.
template <class T>
GradCheckReport check_gradients(const std::function<T()>& f,
                                std::span<const GradCheckEntry<T>> entries,
                                double eps = 1e-5, std::size_t max_samples = 64,
                                std::uint64_t seed = 7) {
  GradCheckReport report;
  Rng rng = make_stream(seed, "gradcheck");
  for (const auto& e : entries) {
    PROMPTDSI_REQUIRE(e.value && e.analytic && e.value->shape() == e.analytic->shape(),
                      ContractError, "analytic gradient shape mismatch for " + e.name);
    std::vector<std::size_t> idx(e.value->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > max_samples) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_samples);
      std::sort(idx.begin(), idx.end());
    }
    GradCheckTensorReport tr{e.name};
    for (std::size_t i : idx) {
      T& slot = (*e.value)[i];
      const T saved = slot;
      slot = saved + T(eps);
      const T fp = f();
      slot = saved - T(eps);
      const T fm = f();
      slot = saved;
      PROMPTDSI_REQUIRE(std::isfinite(double(fp)) && std::isfinite(double(fm)),
                        NumericError, "non-finite objective while checking " + e.name);
      const double numeric = (double(fp) - double(fm)) / (2.0 * eps);
      const double analytic = double((*e.analytic)[i]);
      const double err = relative_error(analytic, numeric);
      ++tr.checked;
      if (err > tr.max_rel_error || tr.checked == 1) {
        if (err >= tr.max_rel_error) {
          tr.max_rel_error = err;
          tr.worst_index = i;
          tr.worst_analytic = analytic;
          tr.worst_numeric = numeric;
        }
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, tr.max_rel_error);
    report.tensors.push_back(std::move(tr));
  }
  return report;
}

}  // namespace promptdsi
