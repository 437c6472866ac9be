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

// Central-difference checks of every analytic gradient path in 64-bit mode.

#include <gtest/gtest.h>

#include "promptdsi/model.hpp"
#include "test_util.hpp"

namespace promptdsi {
namespace {

using testing::tiny_config;
using testing::tiny_model;
using testing::tiny_queries;
using testing::tiny_targets;

constexpr double kEps = 1e-5;
constexpr double kTol = 1e-4;

GradCheckReport run_check(DsiModel<double>& model, const TrainableSet& trainable,
                          double match_weight = 1.0) {
  const auto queries = tiny_queries();
  const auto targets = tiny_targets();
  auto result = dsi_loss<double>(model, queries, targets, trainable, match_weight);
  auto params = collect_params(model, result.grads);
  std::vector<GradCheckEntry<double>> entries;
  for (auto& p : params) entries.push_back({p.name, p.grad, p.value});
  std::function<double()> f = [&] {
    return dsi_loss<double>(model, queries, targets, trainable, match_weight, false).loss;
  };
  auto report = check_gradients<double>(f, entries, kEps);
  for (const auto& t : report.tensors)
    EXPECT_LT(t.max_rel_error, kTol) << t.name << " worst index " << t.worst_index
                                     << " analytic " << t.worst_analytic << " numeric "
                                     << t.worst_numeric;
  return report;
}

TEST(GradientTest, FullEncoderAndClassifierWithoutPrompts) {
  auto model = tiny_model(tiny_config());
  TrainableSet tr{.encoder = true, .segments = {true, true}};
  auto report = run_check(model, tr);
  EXPECT_GT(report.tensors.size(), 30u);
  EXPECT_LT(report.max_rel_error, kTol);
}

void add_pool(DsiModel<double>& model, PoolStrategy strategy, int t_max, std::size_t m = 4,
              std::size_t top_n = 1) {
  const auto& cfg = model.config();
  model.pool = PromptPool<double>(strategy, std::size_t(cfg.dim), cfg.prompt_layers.size(), m,
                                  top_n);
  PoolConfig pc;
  pc.pool_size = 3;
  pc.coda_prompts_per_task = 2;
  Rng rng = make_stream(5, "pool");
  Tensor<double> topic_keys({3, std::size_t(cfg.dim)});
  fill_normal(topic_keys, rng, 1.0);
  for (std::size_t g = 0; g < 3; ++g) normalize_inplace(topic_keys.row(g));
  for (int t = 1; t <= t_max; ++t) allocate_for_timestep(*model.pool, t, pc, &topic_keys, rng);
  // Bigger prompts than the production init so prefix gradients are not tiny.
  for (auto& e : model.pool->entries()) fill_normal(e.prompt, rng, 0.5);
}

TrainableSet frozen_encoder_set(const DsiModel<double>& model) {
  TrainableSet tr;
  tr.encoder = false;
  tr.segments = {false, true};
  tr.pool = true;
  (void)model;
  return tr;
}

class PromptGradientTest
    : public ::testing::TestWithParam<std::tuple<PoolStrategy, SelectionMode>> {};

TEST_P(PromptGradientTest, FrozenEncoderPromptKeysAttentionAndNewSegment) {
  const auto [strategy, mode] = GetParam();
  auto model = tiny_model(tiny_config(mode, {2, 3}));
  add_pool(model, strategy, 2, 4, strategy == PoolStrategy::kCODA ? 1 : 2);
  model.classifier.set_frozen(0, true);
  auto report = run_check(model, frozen_encoder_set(model));
  EXPECT_LT(report.max_rel_error, kTol);
  bool saw_prompt = false, saw_key = false, saw_attention = false;
  for (const auto& t : report.tensors) {
    saw_prompt |= t.name.find("prompt") != std::string::npos;
    saw_key |= t.name.find("key") != std::string::npos;
    saw_attention |= t.name.find("attention") != std::string::npos;
  }
  EXPECT_TRUE(saw_prompt);
  EXPECT_EQ(saw_key, strategy != PoolStrategy::kTopic);
  EXPECT_EQ(saw_attention, strategy == PoolStrategy::kCODA);
}

INSTANTIATE_TEST_SUITE_P(
    Strategies, PromptGradientTest,
    ::testing::Combine(::testing::Values(PoolStrategy::kL2P, PoolStrategy::kSPP,
                                         PoolStrategy::kCODA, PoolStrategy::kTopic),
                       ::testing::Values(SelectionMode::kSinglePassAvg,
                                         SelectionMode::kTwoPassCls)));

TEST(GradientTest, FullEncoderWithPromptsSinglePass) {
  for (auto strategy : {PoolStrategy::kL2P, PoolStrategy::kCODA}) {
    auto model = tiny_model(tiny_config(SelectionMode::kSinglePassAvg, {2}));
    add_pool(model, strategy, 1);
    TrainableSet tr{.encoder = true, .segments = {true, true}, .pool = true};
    auto report = run_check(model, tr);
    EXPECT_LT(report.max_rel_error, kTol) << to_string(strategy);
  }
}

TEST(GradientTest, PromptAtFirstLayerUsesEmbeddingAverage) {
  auto model = tiny_model(tiny_config(SelectionMode::kSinglePassAvg, {1}));
  add_pool(model, PoolStrategy::kL2P, 1);
  TrainableSet tr{.encoder = true, .segments = {true, true}, .pool = true};
  auto report = run_check(model, tr);
  EXPECT_LT(report.max_rel_error, kTol);
}

TEST(GradientTest, QuadraticScalar) {
  Tensor<double> x({1}, {3.0});
  Tensor<double> g({1}, {6.0});
  std::vector<GradCheckEntry<double>> e{{"x", &g, &x}};
  std::function<double()> f = [&] { return x[0] * x[0]; };
  auto r = check_gradients<double>(f, e, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_NEAR(r.tensors[0].worst_numeric, 6.0, 1e-8);
}

TEST(GradientTest, ConstantFunctionHasZeroGradients) {
  Tensor<double> x({3}, {1.0, -2.0, 0.5});
  Tensor<double> g({3});
  std::vector<GradCheckEntry<double>> e{{"x", &g, &x}};
  std::function<double()> f = [] { return 4.0; };
  auto r = check_gradients<double>(f, e, 1e-5);
  EXPECT_EQ(r.max_rel_error, 0.0);
  EXPECT_EQ(r.tensors[0].worst_numeric, 0.0);
}

TEST(GradientTest, NonFiniteObjectiveIsANumericError) {
  Tensor<double> x({1}, {1.0});
  Tensor<double> g({1});
  std::vector<GradCheckEntry<double>> e{{"x", &g, &x}};
  std::function<double()> f = [] { return std::numeric_limits<double>::quiet_NaN(); };
  EXPECT_THROW(check_gradients<double>(f, e, 1e-5), NumericError);
}

}  // namespace
}  // namespace promptdsi
