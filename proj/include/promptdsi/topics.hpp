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

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "promptdsi/errors.hpp"
#include "promptdsi/numerics.hpp"
#include "promptdsi/rng.hpp"
#include "promptdsi/tensor.hpp"

namespace promptdsi {

using TermScores = std::vector<std::pair<int, double>>;

template <class T>
struct TopicModel {
  Tensor<T> centroids;          // G x dim, unit rows
  std::vector<int> assignments;  // one topic per D_0 document
  std::vector<TermScores> top_terms;
  std::vector<double> objective_history;  // after every iteration
  int iterations = 0;

  std::size_t num_topics() const { return centroids.rows(); }
  std::size_t dim() const { return centroids.cols(); }
};

namespace detail {

template <class T>
double squared_distance(std::span<const T> a, std::span<const T> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s;
}

template <class T>
int nearest(const Tensor<T>& centroids, std::span<const T> x, double* dist = nullptr) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = squared_distance<T>(centroids.row(c), x);
    if (d < bd) {
      bd = d;
      best = int(c);
    }
  }
  if (dist) *dist = bd;
  return best;
}

template <class T>
double kmeans_objective(const Tensor<T>& x, const Tensor<T>& centroids,
                        const std::vector<int>& assign) {
  double j = 0;
  for (std::size_t n = 0; n < x.rows(); ++n)
    j += squared_distance<T>(x.row(n), centroids.row(std::size_t(assign[n])));
  return j;
}

template <class T>
void recompute_centroid(const Tensor<T>& x, const std::vector<int>& assign, int c,
                        Tensor<T>& centroids) {
  std::vector<double> acc(x.cols(), 0.0);
  std::size_t count = 0;
  for (std::size_t n = 0; n < x.rows(); ++n)
    if (assign[n] == c) {
      ++count;
      auto r = x.row(n);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += double(r[i]);
    }
  if (count == 0) return;
  auto dst = centroids.row(std::size_t(c));
  for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = T(acc[i] / double(count));
}

}  // namespace detail

/// k-means (k-means++ seeding, Euclidean) on N x dim embeddings. Stops when
/// no assignment changes or after `max_iterations`. An empty cluster takes
/// over the point farthest from its centroid. Centroids are L2-normalized
/// only after convergence.
template <class T>
TopicModel<T> mine_topics(const Tensor<T>& embeddings, std::size_t num_topics, std::uint64_t seed,
                          int max_iterations = 100) {
  const std::size_t N = embeddings.rows(), dim = embeddings.cols();
  PROMPTDSI_REQUIRE(num_topics >= 1, ConfigError, "need at least one topic");
  PROMPTDSI_REQUIRE(num_topics <= N, ConfigError, "more topics than documents");
  PROMPTDSI_REQUIRE(embeddings.all_finite(), NumericError, "non-finite document embedding");
  Rng rng = make_stream(seed, "kmeans");

  TopicModel<T> model;
  Tensor<T> c({num_topics, dim});
  {
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, N - 1)(rng);
    std::copy_n(embeddings.row(first).begin(), dim, c.row(0).begin());
    std::vector<double> d2(N);
    for (std::size_t k = 1; k < num_topics; ++k) {
      double total = 0;
      for (std::size_t n = 0; n < N; ++n) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j)
          best = std::min(best, detail::squared_distance<T>(c.row(j), embeddings.row(n)));
        d2[n] = best;
        total += best;
      }
      std::size_t pick = 0;
      if (total > 0) {
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        for (pick = 0; pick + 1 < N && u >= d2[pick]; ++pick) u -= d2[pick];
      } else {
        pick = std::uniform_int_distribution<std::size_t>(0, N - 1)(rng);
      }
      std::copy_n(embeddings.row(pick).begin(), dim, c.row(k).begin());
    }
  }

  std::vector<int> assign(N, -1);
  int it = 0;
  for (; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t n = 0; n < N; ++n) {
      const int a = detail::nearest(c, embeddings.row(n));
      if (a != assign[n]) {
        assign[n] = a;
        changed = true;
      }
    }
    if (!changed) break;
    for (std::size_t k = 0; k < num_topics; ++k) detail::recompute_centroid(embeddings, assign, int(k), c);
    for (std::size_t k = 0; k < num_topics; ++k) {
      if (std::count(assign.begin(), assign.end(), int(k)) > 0) continue;
      std::size_t far = 0;
      double fd = -1;
      for (std::size_t n = 0; n < N; ++n) {
        const double d = detail::squared_distance<T>(embeddings.row(n), c.row(std::size_t(assign[n])));
        if (d > fd) {
          fd = d;
          far = n;
        }
      }
      const int old = assign[far];
      assign[far] = int(k);
      std::copy_n(embeddings.row(far).begin(), dim, c.row(k).begin());
      detail::recompute_centroid(embeddings, assign, old, c);
    }
    model.objective_history.push_back(detail::kmeans_objective(embeddings, c, assign));
  }
  model.iterations = it;
  for (std::size_t k = 0; k < num_topics; ++k) {
    auto r = c.row(k);
    if (l2_norm<T>(r) > 0) normalize_inplace<T>(r);
  }
  model.centroids = std::move(c);
  model.assignments = std::move(assign);
  return model;
}

/// score(w, c) = tf(w, c) * log(1 + A / f(w)), A = mean tokens per cluster.
/// Returns up to `top_k` terms per cluster, best first, ties by token id.
inline std::vector<TermScores> ctfidf_terms(std::span<const int> assignments,
                                            std::span<const std::vector<int>> documents,
                                            std::size_t num_topics, std::size_t top_k) {
  PROMPTDSI_REQUIRE(assignments.size() == documents.size(), ContractError,
                    "one assignment per document");
  std::vector<std::map<int, double>> tf(num_topics);
  std::map<int, double> f;
  double tokens = 0;
  for (std::size_t d = 0; d < documents.size(); ++d) {
    const int c = assignments[d];
    PROMPTDSI_REQUIRE(c >= 0 && std::size_t(c) < num_topics, IndexError, "assignment out of range");
    for (int w : documents[d]) {
      tf[std::size_t(c)][w] += 1;
      f[w] += 1;
      tokens += 1;
    }
  }
  const double avg = num_topics ? tokens / double(num_topics) : 0.0;
  std::vector<TermScores> out(num_topics);
  for (std::size_t c = 0; c < num_topics; ++c) {
    for (const auto& [w, n] : tf[c]) out[c].emplace_back(w, n * std::log(1.0 + avg / f[w]));
    std::sort(out[c].begin(), out[c].end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (out[c].size() > top_k) out[c].resize(top_k);
  }
  return out;
}

/// Fixed prompt keys, one unit row per topic in topic-id order.
template <class T>
Tensor<T> topic_keys(const TopicModel<T>& model) {
  return model.centroids;
}

template <class T>
nlohmann::ordered_json to_json(const TopicModel<T>& m) {
  nlohmann::ordered_json j;
  j["num_topics"] = m.num_topics();
  j["iterations"] = m.iterations;
  j["assignments"] = m.assignments;
  j["objective_history"] = m.objective_history;
  auto& topics = j["topics"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < m.num_topics(); ++k) {
    nlohmann::ordered_json t;
    auto r = m.centroids.row(k);
    t["centroid"] = std::vector<double>(r.begin(), r.end());
    auto& terms = t["top_terms"] = nlohmann::ordered_json::array();
    if (k < m.top_terms.size())
      for (const auto& [w, s] : m.top_terms[k]) terms.push_back({w, s});
    topics.push_back(std::move(t));
  }
  return j;
}

template <class T>
TopicModel<T> topic_model_from_json(const nlohmann::json& j) {
  TopicModel<T> m;
  try {
    const auto& topics = j.at("topics");
    PROMPTDSI_REQUIRE(!topics.empty(), DataError, "topic model has no topics");
    const std::size_t dim = topics[0].at("centroid").size();
    m.centroids = Tensor<T>({topics.size(), dim});
    for (std::size_t k = 0; k < topics.size(); ++k) {
      auto c = topics[k].at("centroid").get<std::vector<double>>();
      PROMPTDSI_REQUIRE(c.size() == dim, DataError, "centroids differ in dimension");
      for (std::size_t i = 0; i < dim; ++i) m.centroids.at(k, i) = T(c[i]);
      TermScores terms;
      for (const auto& p : topics[k].at("top_terms"))
        terms.emplace_back(p.at(0).get<int>(), p.at(1).get<double>());
      m.top_terms.push_back(std::move(terms));
    }
    if (j.contains("assignments")) m.assignments = j["assignments"].get<std::vector<int>>();
    if (j.contains("objective_history"))
      m.objective_history = j["objective_history"].get<std::vector<double>>();
    if (j.contains("iterations")) m.iterations = j["iterations"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed topic model: ") + e.what());
  }
  return m;
}

}  // namespace promptdsi
