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
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "promptdsi/errors.hpp"
#include "promptdsi/retrieval.hpp"

namespace promptdsi {

template <class T>
int hits_at_k(const RankedList<T>& ranked, int gold, std::size_t k) {
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t i = 0; i < n; ++i)
    if (ranked.items[i].first == gold) return 1;
  return 0;
}

template <class T>
double mrr_at_k(const RankedList<T>& ranked, int gold, std::size_t k = 10) {
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t i = 0; i < n; ++i)
    if (ranked.items[i].first == gold) return 1.0 / double(i + 1);
  return 0.0;
}

/// Lower-triangular P[t][i], 0 <= i <= t.
class PerfMatrix {
 public:
  PerfMatrix() = default;
  explicit PerfMatrix(std::string metric) : metric_(std::move(metric)) {}

  const std::string& metric() const { return metric_; }
  std::size_t rows() const { return rows_.size(); }
  const std::vector<double>& row(std::size_t t) const { return rows_.at(t); }

  void add_row(std::vector<double> row) {
    PROMPTDSI_REQUIRE(row.size() == rows_.size() + 1, ContractError,
                      "row t must hold exactly t+1 values");
    rows_.push_back(std::move(row));
  }
  double at(std::size_t t, std::size_t i) const {
    PROMPTDSI_REQUIRE(t < rows_.size() && i <= t, IndexError, "P[t][i] outside the triangle");
    return rows_[t][i];
  }
  friend bool operator==(const PerfMatrix&, const PerfMatrix&) = default;

 private:
  std::string metric_;
  std::vector<std::vector<double>> rows_;
};

struct ClMetrics {
  std::optional<double> average;           // A_t
  std::optional<double> learning_average;  // LA_t
  std::optional<double> forgetting;        // F_t
  double forgetting_d0 = 0.0;
};

/// A_t and LA_t average over new corpora (i >= 1); F_t sums over i = 0..t-1
/// using the best value of each corpus over i' in [i, t]. forgetting_d0 is the drop of
/// D_0 from its initial value, clipped at zero.
inline ClMetrics cl_metrics(const PerfMatrix& P, std::size_t t) {
  PROMPTDSI_REQUIRE(t < P.rows(), IndexError, "rows 0..t must be populated");
  ClMetrics m;
  m.forgetting_d0 = std::max(P.at(0, 0) - P.at(t, 0), 0.0);
  if (t == 0) return m;
  double a = 0, la = 0, f = 0;
  for (std::size_t i = 1; i <= t; ++i) {
    a += P.at(t, i);
    la += P.at(i, i);
  }
  for (std::size_t i = 0; i < t; ++i) {
    double best = 0.0;  // i' = t
    for (std::size_t ip = i; ip < t; ++ip) best = std::max(best, P.at(ip, i) - P.at(t, i));
    f += best;
  }
  m.average = a / double(t);
  m.learning_average = la / double(t);
  m.forgetting = f / double(t);
  return m;
}

struct MemoryAccount {
  std::uint64_t pool_bytes = 0;
  std::optional<std::uint64_t> cache_bytes;
};

/// Prompts plus keys: dim * M * (m + 1) floats. Centroid cache: dim per doc.
inline MemoryAccount memory_accounting(std::uint64_t dim, std::uint64_t pool_size,
                                       std::uint64_t prompt_length, std::uint64_t bytes_per_float,
                                       std::optional<std::uint64_t> cache_docs = std::nullopt) {
  MemoryAccount out;
  out.pool_bytes = dim * pool_size * (prompt_length + 1) * bytes_per_float;
  if (cache_docs) out.cache_bytes = dim * *cache_docs * bytes_per_float;
  return out;
}

inline double to_kib(std::uint64_t bytes) { return double(bytes) / 1024.0; }
inline double to_mib(std::uint64_t bytes) { return double(bytes) / (1024.0 * 1024.0); }

/// One trainable tensor observed during a timestep.
struct TrainableRecord {
  std::string name;
  std::uint64_t size = 0;
  int timestep = 0;
};

/// Distinct trainable scalars over timesteps [t_begin, t_end]. A tensor
/// trained at several timesteps (a shared L2P prompt) counts once.
inline std::uint64_t params_accounting(std::span<const TrainableRecord> records, int t_begin,
                                       int t_end) {
  std::set<std::string> seen;
  std::uint64_t total = 0;
  for (const auto& r : records) {
    if (r.timestep < t_begin || r.timestep > t_end) continue;
    if (seen.insert(r.name).second) total += r.size;
  }
  return total;
}

}  // namespace promptdsi
