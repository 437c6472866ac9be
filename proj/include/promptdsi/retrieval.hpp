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
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "promptdsi/errors.hpp"
#include "promptdsi/rng.hpp"
#include "promptdsi/tensor.hpp"

namespace promptdsi {

/// Atomic docids: dense integers in arrival order, grouped into one
/// contiguous segment per timestep.
class DocidRegistry {
 public:
  struct Segment {
    int timestep = 0;
    std::size_t begin = 0, end = 0;
    std::size_t size() const { return end - begin; }
  };

  /// Registers a whole corpus as the next segment; returns its segment index.
  std::size_t add_segment(int timestep, std::span<const std::string> external_ids) {
    PROMPTDSI_REQUIRE(!external_ids.empty(), ContractError, "empty segment");
    PROMPTDSI_REQUIRE(segments_.empty() || segments_.back().timestep < timestep,
                      ContractError, "segments must be ordered by timestep");
    Segment seg{timestep, ids_.size(), ids_.size()};
    for (const auto& ext : external_ids) {
      if (!index_.emplace(ext, ids_.size()).second)
        throw DataError("duplicate document id '" + ext + "'");
      ids_.push_back(ext);
    }
    seg.end = ids_.size();
    segments_.push_back(seg);
    return segments_.size() - 1;
  }

  std::size_t size() const { return ids_.size(); }
  bool contains(const std::string& ext) const { return index_.count(ext) > 0; }
  int docid(const std::string& ext) const {
    auto it = index_.find(ext);
    if (it == index_.end()) throw DataError("unregistered document id '" + ext + "'");
    return int(it->second);
  }
  const std::string& external_id(std::size_t docid) const { return ids_.at(docid); }
  const std::vector<Segment>& segments() const { return segments_; }
  const std::vector<std::string>& external_ids() const { return ids_; }

  /// Segment index owning a docid.
  std::size_t segment_of(std::size_t docid) const {
    for (std::size_t s = 0; s < segments_.size(); ++s)
      if (docid >= segments_[s].begin && docid < segments_[s].end) return s;
    throw IndexError("docid outside registry");
  }

 private:
  std::vector<std::string> ids_;
  std::map<std::string, std::size_t> index_;
  std::vector<Segment> segments_;
};

/// theta_l stored as one row block per segment (rows are docid columns of
/// the dim x |D| matrix). Frozen segments are never handed to the optimizer.
template <class T>
class Classifier {
 public:
  Classifier() = default;
  explicit Classifier(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t num_segments() const { return segments_.size(); }
  std::size_t total_docs() const { return total_; }
  Tensor<T>& segment(std::size_t s) { return segments_.at(s); }
  const Tensor<T>& segment(std::size_t s) const { return segments_.at(s); }
  bool frozen(std::size_t s) const { return frozen_.at(s); }
  void set_frozen(std::size_t s, bool f) { frozen_.at(s) = f; }
  void freeze_all() { std::fill(frozen_.begin(), frozen_.end(), true); }
  void unfreeze_all() { std::fill(frozen_.begin(), frozen_.end(), false); }

  void append_segment(Tensor<T> rows) {
    PROMPTDSI_REQUIRE(rows.rank() == 2 && rows.cols() == dim_, ContractError,
                      "segment must be n x dim");
    total_ += rows.rows();
    segments_.push_back(std::move(rows));
    frozen_.push_back(false);
  }

  /// theta_l^T h for every docid.
  std::vector<T> scores(std::span<const T> h) const {
    PROMPTDSI_REQUIRE(h.size() == dim_, ContractError, "query embedding has wrong dim");
    std::vector<T> out(total_);
    std::size_t o = 0;
    ConstVectorMap<T> hv(h.data(), Eigen::Index(dim_));
    for (const auto& seg : segments_) {
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dst(out.data() + o, Eigen::Index(seg.rows()));
      dst.noalias() = seg.matrix() * hv;
      o += seg.rows();
    }
    return out;
  }

  /// Batched logits: H (B x dim) -> B x total_docs.
  Tensor<T> logits(const Tensor<T>& h) const {
    Tensor<T> out({h.rows(), total_});
    auto om = out.matrix();
    Eigen::Index o = 0;
    for (const auto& seg : segments_) {
      om.middleCols(o, Eigen::Index(seg.rows())).noalias() = h.matrix() * seg.matrix().transpose();
      o += Eigen::Index(seg.rows());
    }
    return out;
  }

  template <class U>
  Classifier<U> cast() const {
    Classifier<U> out(dim_);
    for (std::size_t s = 0; s < segments_.size(); ++s) {
      out.append_segment(segments_[s].template cast<U>());
      out.set_frozen(s, frozen_[s]);
    }
    return out;
  }

 private:
  std::size_t dim_ = 0;
  std::size_t total_ = 0;
  std::vector<Tensor<T>> segments_;
  std::vector<bool> frozen_;
};

/// Appends `n_new` docid columns drawn from normal(0, stddev). Existing
/// columns are untouched.
template <class T>
void expand_classifier(Classifier<T>& cls, std::size_t n_new, Rng& rng,
                       double stddev = 0.02) {
  PROMPTDSI_REQUIRE(n_new >= 1, ContractError, "expansion by zero columns");
  Tensor<T> rows({n_new, cls.dim()});
  fill_normal(rows, rng, stddev);
  cls.append_segment(std::move(rows));
}

template <class T>
struct RankedList {
  std::vector<std::pair<int, T>> items;  // (docid, score), descending score
  std::size_t size() const { return items.size(); }
};

/// Exact top-k by descending score, ties by ascending docid.
template <class T>
RankedList<T> rank_scores(std::span<const T> scores, std::size_t k) {
  PROMPTDSI_REQUIRE(k > 0, ContractError, "k must be positive");
  PROMPTDSI_REQUIRE(k <= scores.size(), ContractError, "k exceeds the number of docids");
  std::vector<int> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  auto better = [&](int a, int b) {
    if (scores[std::size_t(a)] != scores[std::size_t(b)])
      return scores[std::size_t(a)] > scores[std::size_t(b)];
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(k), order.end(), better);
  RankedList<T> out;
  out.items.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.items.emplace_back(order[i], scores[std::size_t(order[i])]);
  return out;
}

template <class T>
RankedList<T> score_and_rank(std::span<const T> h, const Classifier<T>& cls, std::size_t k) {
  PROMPTDSI_REQUIRE(k > 0, ContractError, "k must be positive");
  const auto s = cls.scores(h);
  return rank_scores<T>(s, k);
}

}  // namespace promptdsi
