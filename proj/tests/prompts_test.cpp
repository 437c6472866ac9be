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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "promptdsi/model.hpp"
#include "promptdsi/prompts.hpp"
#include "test_util.hpp"

namespace promptdsi {
namespace {

using testing::tiny_config;
using testing::tiny_model;
using testing::tiny_queries;
using testing::tiny_targets;

std::size_t pick(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

PromptPool<double> random_pool(PoolStrategy s, std::size_t M, std::size_t dim, std::size_t top_n,
                               Rng& rng) {
  PromptPool<double> pool(s, dim, 1, 4, top_n);
  for (std::size_t i = 0; i < M; ++i) {
    PromptEntry<double> e;
    e.prompt = pool.new_prompt_tensor();
    fill_normal(e.prompt, rng, 1.0);
    e.key = Tensor<double>({dim});
    fill_normal(e.key, rng, 1.0);
    e.attention = Tensor<double>({dim});
    fill_normal(e.attention, rng, 1.0);
    pool.entries().push_back(std::move(e));
  }
  return pool;
}

double plain_cos_distance(const Tensor<double>& a, const Tensor<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

// Exhaustive search over every N-subset of the pool.
double best_subset_cost(const Tensor<double>& h, const PromptPool<double>& pool, std::size_t n) {
  const std::size_t M = pool.size();
  double best = std::numeric_limits<double>::infinity();
  for (unsigned mask = 0; mask < (1u << M); ++mask) {
    if (std::size_t(__builtin_popcount(mask)) != n) continue;
    double cost = 0;
    for (std::size_t i = 0; i < M; ++i)
      if (mask & (1u << i)) cost += plain_cos_distance(h, pool.entry(i).key);
    best = std::min(best, cost);
  }
  return best;
}

TEST(SelectTopN, MatchesExhaustiveSubsetSearch) {
  Rng rng = make_stream(3, "test.select");
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t M = 1 + pick(rng, 8);
    const std::size_t N = 1 + pick(rng, M);
    const std::size_t dim = 4 + pick(rng, 5);
    auto pool = random_pool(PoolStrategy::kL2P, M, dim, N, rng);
    Tensor<double> h({dim});
    fill_normal(h, rng, 1.0);
    auto sel = select_topN(h, pool);
    ASSERT_EQ(sel.ids.size(), N);
    EXPECT_NEAR(sel.match_loss, best_subset_cost(h, pool, N), 1e-12) << "trial " << trial;
    for (std::size_t j = 1; j < N; ++j) EXPECT_LE(sel.distances[j - 1], sel.distances[j]);
  }
}

TEST(SelectTopN, TiesGoToLowerId) {
  PromptPool<double> pool(PoolStrategy::kL2P, 2, 1, 2, 2);
  for (int i = 0; i < 4; ++i) {
    PromptEntry<double> e;
    e.prompt = pool.new_prompt_tensor();
    e.key = Tensor<double>({2}, {1.0, i == 0 ? -1.0 : 1.0});
    pool.entries().push_back(std::move(e));
  }
  Tensor<double> h({2}, {1.0, 1.0});
  auto sel = select_topN(h, pool);
  EXPECT_EQ(sel.ids, (std::vector<std::size_t>{1, 2}));
  EXPECT_NEAR(sel.match_loss, 0.0, 1e-15);
}

TEST(SelectTopN, CandidatesRestrictTheSearch) {
  Rng rng = make_stream(4, "test.select");
  auto pool = random_pool(PoolStrategy::kSPP, 6, 5, 1, rng);
  Tensor<double> h = pool.entry(1).key;
  EXPECT_EQ(select_topN(h, pool).ids.front(), 1u);
  std::vector<std::size_t> only{4};
  EXPECT_EQ(select_topN(h, pool, only).ids, std::vector<std::size_t>{4});
}

TEST(SelectTopN, RejectsZeroNormAndEmptyPool) {
  Rng rng = make_stream(5, "test.select");
  auto pool = random_pool(PoolStrategy::kL2P, 3, 4, 1, rng);
  Tensor<double> zero({4});
  EXPECT_THROW(select_topN(zero, pool), DomainError);
  PromptPool<double> empty(PoolStrategy::kL2P, 4, 1, 4, 1);
  Tensor<double> h({4}, {1, 0, 0, 0});
  EXPECT_THROW(select_topN(h, empty), ContractError);
}

TEST(MatchLoss, StaleSelectionIsRejected) {
  Rng rng = make_stream(6, "test.select");
  auto pool = random_pool(PoolStrategy::kL2P, 3, 4, 1, rng);
  Tensor<double> h({4}, {1, 2, 3, 4});
  auto sel = select_topN(h, pool);
  pool.mark_modified();
  std::vector<Tensor<double>> grads(pool.size());
  EXPECT_THROW(match_loss_grad(h, pool, sel, 1.0, grads), ContractError);
}

TEST(MatchLoss, TopicKeysNeverReceiveGradient) {
  Rng rng = make_stream(7, "test.select");
  auto pool = random_pool(PoolStrategy::kTopic, 3, 4, 1, rng);
  Tensor<double> h({4}, {1, 2, 3, 4});
  auto sel = select_topN(h, pool);
  std::vector<Tensor<double>> grads(pool.size());
  Tensor<double> dh({4});
  match_loss_grad(h, pool, sel, 1.0, grads, &dh);
  for (const auto& g : grads) EXPECT_TRUE(g.empty());
}

TEST(Coda, MatchesLoopOracle) {
  Rng rng = make_stream(8, "test.coda");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t M = 1 + pick(rng, 6), dim = 3 + pick(rng, 5);
    auto pool = random_pool(PoolStrategy::kCODA, M, dim, 1, rng);
    Tensor<double> h({dim});
    fill_normal(h, rng, 1.0);
    auto out = coda_compose(h, pool);
    std::vector<double> want(pool.new_prompt_tensor().size(), 0.0);
    for (std::size_t i = 0; i < M; ++i) {
      const auto& e = pool.entry(i);
      Tensor<double> mod({dim});
      for (std::size_t c = 0; c < dim; ++c) mod[c] = h[c] * e.attention[c];
      const double alpha = 1.0 - plain_cos_distance(mod, e.key);
      EXPECT_NEAR(out.alphas[i], alpha, 1e-12);
      for (std::size_t j = 0; j < want.size(); ++j) want[j] += alpha * e.prompt[j];
    }
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(out.prompt[j], want[j], 1e-12);
  }
}

TEST(Coda, OpposedKeysCancel) {
  PromptPool<double> pool(PoolStrategy::kCODA, 3, 1, 2, 1);
  for (double sign : {1.0, -1.0}) {
    PromptEntry<double> e;
    e.prompt = pool.new_prompt_tensor();
    e.prompt.fill(0.7);
    e.key = Tensor<double>({3}, {sign, 2 * sign, 0.5 * sign});
    e.attention = Tensor<double>({3}, {1, 1, 1});
    pool.entries().push_back(std::move(e));
  }
  Tensor<double> h({3}, {0.3, -1.0, 2.0});
  auto out = coda_compose(h, pool);
  EXPECT_NEAR(out.alphas[0], -out.alphas[1], 1e-15);
  for (double v : out.prompt.values()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Coda, RequiresCodaPool) {
  Rng rng = make_stream(9, "test.coda");
  auto pool = random_pool(PoolStrategy::kL2P, 2, 3, 1, rng);
  Tensor<double> h({3}, {1, 1, 1});
  EXPECT_THROW(coda_compose(h, pool), ContractError);
}

TEST(Allocation, SppGrowsOnePairAndFreezesThePast) {
  PromptPool<double> pool(PoolStrategy::kSPP, 6, 2, 4, 1);
  PoolConfig pc;
  Rng rng = make_stream(1, "test.alloc");
  FreezePlan plan;
  for (int t = 1; t <= 3; ++t) {
    plan = allocate_for_timestep<double>(pool, t, pc, nullptr, rng);
    EXPECT_EQ(pool.size(), std::size_t(t));
  }
  EXPECT_EQ(plan.trainable, std::vector<std::size_t>{2});
  EXPECT_EQ(plan.frozen, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(pool.entry(2).provenance, 3);
}

TEST(Allocation, L2pPoolStaysConstant) {
  PromptPool<double> pool(PoolStrategy::kL2P, 6, 1, 4, 1);
  PoolConfig pc;
  Rng rng = make_stream(1, "test.alloc");
  for (int t = 1; t <= 5; ++t) {
    auto plan = allocate_for_timestep<double>(pool, t, pc, nullptr, rng);
    EXPECT_EQ(pool.size(), 5u);
    EXPECT_EQ(plan.trainable.size(), 5u);
  }
}

TEST(Allocation, CodaAppendsOrthogonalEntries) {
  PromptPool<double> pool(PoolStrategy::kCODA, 16, 1, 4, 1);
  PoolConfig pc;
  Rng rng = make_stream(1, "test.alloc");
  FreezePlan plan;
  for (int t = 1; t <= 5; ++t) plan = allocate_for_timestep<double>(pool, t, pc, nullptr, rng);
  EXPECT_EQ(pool.size(), 10u);
  EXPECT_EQ(plan.frozen.size(), 8u);
  EXPECT_EQ(plan.trainable, (std::vector<std::size_t>{8, 9}));
  for (std::size_t i = 0; i < pool.size(); ++i)
    for (std::size_t j = 0; j < i; ++j) {
      EXPECT_NEAR(pool.entry(i).key.vector().dot(pool.entry(j).key.vector()), 0.0, 1e-10);
      EXPECT_NEAR(pool.entry(i).attention.vector().dot(pool.entry(j).attention.vector()), 0.0,
                  1e-10);
    }
}

TEST(Allocation, TopicNeedsATopicModel) {
  PromptPool<double> pool(PoolStrategy::kTopic, 4, 1, 4, 1);
  PoolConfig pc;
  Rng rng = make_stream(1, "test.alloc");
  EXPECT_THROW(allocate_for_timestep<double>(pool, 1, pc, nullptr, rng), ConfigError);
  Tensor<double> keys({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0.6, 0.8});
  allocate_for_timestep<double>(pool, 1, pc, &keys, rng);
  allocate_for_timestep<double>(pool, 2, pc, &keys, rng);
  ASSERT_EQ(pool.size(), 3u);
  for (std::size_t g = 0; g < 3; ++g) {
    EXPECT_TRUE(pool.entry(g).key_frozen);
    EXPECT_FALSE(pool.entry(g).frozen);
    EXPECT_NEAR(pool.entry(g).key.vector().norm(), 1.0, 1e-15);
  }
}

TEST(Allocation, StartsAtTimestepOne) {
  PromptPool<double> pool(PoolStrategy::kL2P, 4, 1, 4, 1);
  PoolConfig pc;
  Rng rng = make_stream(1, "test.alloc");
  EXPECT_THROW(allocate_for_timestep<double>(pool, 0, pc, nullptr, rng), ContractError);
}

TEST(Utilization, HandCounts) {
  std::vector<SelectionLogEntry<double>> log = {
      {0, "a", {0}, {}}, {0, "b", {0}, {}}, {1, "c", {2}, {}}, {1, "d", {0}, {}}};
  auto s = utilization_stats<double>(log, 4);
  EXPECT_EQ(s.prompts_used, 2u);
  EXPECT_EQ(s.above_uniform, 1u);  // 0.25 is not strictly above 1/4
  EXPECT_DOUBLE_EQ(s.overall_frequency[0], 0.75);
  EXPECT_DOUBLE_EQ(s.frequency[1][2], 0.5);
  EXPECT_DOUBLE_EQ(s.concentration, 0.75);
  EXPECT_EQ(s.queries_per_corpus, (std::vector<std::size_t>{2, 2}));
}

TEST(Utilization, RejectsOutOfRangeIds) {
  std::vector<SelectionLogEntry<double>> log = {{0, "a", {7}, {}}};
  EXPECT_THROW(utilization_stats<double>(log, 4), IndexError);
}

void attach_pool(DsiModel<double>& m, PoolStrategy s, int t_max) {
  const auto& cfg = m.config();
  m.pool = PromptPool<double>(s, std::size_t(cfg.dim), cfg.prompt_layers.size(), 4, 1);
  PoolConfig pc;
  pc.pool_size = 3;
  Rng rng = make_stream(2, "test.pool");
  for (int t = 1; t <= t_max; ++t) allocate_for_timestep<double>(*m.pool, t, pc, nullptr, rng);
}

TEST(Selection, SinglePassSelectionIgnoresPromptValues) {
  auto m = tiny_model(tiny_config());
  attach_pool(m, PoolStrategy::kL2P, 1);
  const auto q = tiny_queries();
  auto before = model_forward(m, pack<double>(q), false, {});
  Rng rng = make_stream(3, "test.pool");
  for (auto& e : m.pool->entries()) fill_normal(e.prompt, rng, 2.0);
  auto after = model_forward(m, pack<double>(q), false, {});
  for (std::size_t b = 0; b < q.size(); ++b)
    EXPECT_EQ(before.selections[b].ids, after.selections[b].ids);
  EXPECT_EQ(digest(before.selection_embedding), digest(after.selection_embedding));
}

// Training only the pool under L2P should pull the selected keys toward the
// queries, so the match term falls.
TEST(Selection, MatchLossFallsWhenTrainingThePool) {
  auto m = tiny_model(tiny_config());
  attach_pool(m, PoolStrategy::kL2P, 1);
  TrainableSet tr;
  tr.segments = {false, false};
  tr.pool = true;
  const auto q = tiny_queries();
  const auto y = tiny_targets();
  OptimizerState<double> opt;
  opt.config.learning_rate = 0.05;
  opt.config.weight_decay = 0.0;
  const double first = dsi_loss<double>(m, q, y, tr, 1.0, false).match;
  double last = first;
  for (int step = 0; step < 60; ++step) {
    auto r = dsi_loss<double>(m, q, y, tr, 1.0);
    auto params = collect_params(m, r.grads);
    adamw_step<double>(params, opt);
    m.pool->mark_modified();
    last = r.match;
  }
  last = dsi_loss<double>(m, q, y, tr, 1.0, false).match;
  EXPECT_LT(last, 0.5 * first);
}

TEST(Selection, FrozenEntriesStayByteIdentical) {
  auto m = tiny_model(tiny_config());
  attach_pool(m, PoolStrategy::kSPP, 3);
  std::vector<std::uint64_t> before;
  for (std::size_t i = 0; i < 2; ++i)
    before.push_back(digest(m.pool->entry(i).prompt) ^ digest(m.pool->entry(i).key));
  TrainableSet tr;
  tr.segments = {false, true};
  tr.pool = true;
  OptimizerState<double> opt;
  opt.config.learning_rate = 0.05;
  const auto q = tiny_queries();
  const auto y = tiny_targets();
  const auto trained_before = digest(m.pool->entry(2).prompt);
  for (int step = 0; step < 10; ++step) {
    auto r = dsi_loss<double>(m, q, y, tr, 1.0);
    auto params = collect_params(m, r.grads);
    adamw_step<double>(params, opt);
    m.pool->mark_modified();
  }
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_EQ(before[i], digest(m.pool->entry(i).prompt) ^ digest(m.pool->entry(i).key));
  EXPECT_NE(trained_before, digest(m.pool->entry(2).prompt));
}

}  // namespace
}  // namespace promptdsi
