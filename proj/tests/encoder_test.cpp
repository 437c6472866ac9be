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

#include "promptdsi/model.hpp"
#include "test_util.hpp"

namespace pd = promptdsi;
using pd::Tensor;
using pd::testing::tiny_config;
using pd::testing::tiny_model;

namespace {

pd::LayerWeights<double> identity_layer(std::size_t dim) {
  pd::LayerWeights<double> w;
  for (Tensor<double>* m : {&w.wq, &w.wk, &w.wv, &w.wo}) {
    *m = Tensor<double>({dim, dim});
    for (std::size_t i = 0; i < dim; ++i) m->at(i, i) = 1.0;
  }
  for (Tensor<double>* b : {&w.bq, &w.bv, &w.bo}) *b = Tensor<double>({dim});
  return w;
}

pd::Prefix<double> random_prefix(std::size_t half, std::size_t dim, std::uint64_t seed) {
  pd::Rng rng = pd::make_stream(seed, "prefix");
  pd::Prefix<double> p{Tensor<double>({half, dim}), Tensor<double>({half, dim})};
  pd::fill_normal(p.keys, rng, 0.5);
  pd::fill_normal(p.values, rng, 0.5);
  return p;
}

// Straight-loop single-head attention over [prefix; x] with identity maps.
std::vector<double> loop_attention(const std::vector<double>& x, const std::vector<double>& pk,
                                   const std::vector<double>& pv) {
  std::vector<double> keys = pk, vals = pv;
  keys.insert(keys.end(), x.begin(), x.end());
  vals.insert(vals.end(), x.begin(), x.end());
  std::vector<double> out;
  for (double q : x) {
    std::vector<double> a;
    double mx = -1e300, s = 0;
    for (double k : keys) mx = std::max(mx, q * k);
    for (double k : keys) s += std::exp(q * k - mx);
    double o = 0;
    for (std::size_t j = 0; j < keys.size(); ++j) o += std::exp(q * keys[j] - mx) / s * vals[j];
    out.push_back(o);
  }
  return out;
}

}  // namespace

TEST(AttentionWithPrefix, HandEvaluation) {
  // Weights softmax([0, 1]) = [0.2689, 0.7311] over values [2, 1].
  auto w = identity_layer(1);
  Tensor<double> x({1, 1}, {1.0});
  pd::Prefix<double> p{Tensor<double>({1, 1}, {0.0}), Tensor<double>({1, 1}, {2.0})};
  auto y = pd::attention_with_prefix(x, p, w, 1);
  const double a0 = 1.0 / (1.0 + std::exp(1.0));
  EXPECT_NEAR(y.at(0, 0), a0 * 2.0 + (1.0 - a0) * 1.0, 1e-15);
  EXPECT_NEAR(y.at(0, 0), 1.2689, 1e-4);
}

TEST(AttentionWithPrefix, MatchesLoopOracle) {
  auto w = identity_layer(1);
  std::vector<double> xs{0.3, -1.1, 0.8}, pk{0.5, -0.2}, pv{1.5, -0.7};
  Tensor<double> x({3, 1}, xs);
  pd::Prefix<double> p{Tensor<double>({2, 1}, pk), Tensor<double>({2, 1}, pv)};
  auto y = pd::attention_with_prefix(x, p, w, 1);
  auto ref = loop_attention(xs, pk, pv);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.at(i, 0), ref[i], 1e-14);
}

TEST(AttentionWithPrefix, EmptyPrefixIsPlainSelfAttentionAndLengthIsN) {
  auto w = identity_layer(1);
  std::vector<double> xs{0.3, -1.1, 0.8};
  Tensor<double> x({3, 1}, xs);
  auto y = pd::attention_with_prefix(x, pd::Prefix<double>{Tensor<double>({0, 1}), Tensor<double>({0, 1})}, w, 1);
  auto ref = loop_attention(xs, {}, {});
  ASSERT_EQ(y.rows(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.at(i, 0), ref[i], 1e-14);
  auto longer = pd::attention_with_prefix(x, random_prefix(5, 1, 3), w, 1);
  EXPECT_EQ(longer.rows(), 3u);
}

TEST(AttentionWithPrefix, HeadsMustDivideDim) {
  auto w = identity_layer(3);
  Tensor<double> x({1, 3});
  EXPECT_THROW(pd::attention_with_prefix(x, random_prefix(1, 3, 1), w, 2), pd::ConfigError);
}

TEST(EncoderConfig, Validation) {
  auto cfg = tiny_config();
  EXPECT_NO_THROW(cfg.validate());
  cfg.num_heads = 3;
  EXPECT_THROW(cfg.validate(), pd::ConfigError);
  cfg = tiny_config(pd::SelectionMode::kSinglePassAvg, {1, 3});
  EXPECT_THROW(cfg.validate(), pd::ConfigError);  // not contiguous
  cfg = tiny_config(pd::SelectionMode::kSinglePassAvg, {4});
  EXPECT_THROW(cfg.validate(), pd::ConfigError);  // beyond L
}

TEST(EncoderForward, DeterministicAndRejectsBadInput) {
  auto m = tiny_model(tiny_config());
  std::vector<int> q{0, 3, 5, 7};
  auto a = pd::encoder_forward(m.encoder, q);
  auto b = pd::encoder_forward(m.encoder, q);
  EXPECT_EQ(a.h_q, b.h_q);
  EXPECT_EQ(a.hidden.size(), 4u);
  std::vector<int> no_cls{3, 5};
  EXPECT_THROW(pd::encoder_forward(m.encoder, no_cls), pd::DataError);
  std::vector<int> unknown{0, 20};
  EXPECT_THROW(pd::encoder_forward(m.encoder, unknown), pd::VocabularyError);
  std::vector<int> too_long(9, 1);
  too_long[0] = 0;
  EXPECT_THROW(pd::encoder_forward(m.encoder, too_long), pd::DataError);
}

TEST(EncoderForward, EmptyPrefixEquivalence) {
  auto m = tiny_model(tiny_config());
  std::vector<int> q{0, 3, 5, 7};
  std::map<int, pd::Prefix<double>> empty{{2, {Tensor<double>({0, 8}), Tensor<double>({0, 8})}}};
  EXPECT_EQ(pd::encoder_forward(m.encoder, q).h_q, pd::encoder_forward(m.encoder, q, empty).h_q);
}

TEST(EncoderForward, PrefixLocality) {
  auto m = tiny_model(tiny_config());
  std::vector<int> q{0, 3, 5, 7};
  std::map<int, pd::Prefix<double>> p1{{2, random_prefix(2, 8, 1)}};
  std::map<int, pd::Prefix<double>> p2{{2, random_prefix(2, 8, 2)}};
  auto a = pd::encoder_forward(m.encoder, q, p1);
  auto b = pd::encoder_forward(m.encoder, q, p2);
  EXPECT_EQ(a.hidden[0], b.hidden[0]);
  EXPECT_EQ(a.hidden[1], b.hidden[1]);
  EXPECT_NE(a.hidden[2], b.hidden[2]);
  EXPECT_NE(a.h_q, b.h_q);
  EXPECT_EQ(pd::avg_at_layer(m.encoder, q, 2), pd::avg_at_layer(m.encoder, q, 2));
}

TEST(AvgAtLayer, MeansOfHiddenStates) {
  auto m = tiny_model(tiny_config());
  std::vector<int> one{0};
  auto out = pd::encoder_forward(m.encoder, one);
  auto avg = pd::avg_at_layer(m.encoder, one, 3);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(avg[c], out.hidden[2].at(0, c));

  // Layer 1: mean of token + position embeddings.
  std::vector<int> two{0, 5};
  auto a1 = pd::avg_at_layer(m.encoder, two, 1);
  const auto& w = m.encoder.weights();
  for (std::size_t c = 0; c < 8; ++c) {
    const double e1 = w.token_embedding.at(0, c) + w.position_embedding.at(0, c);
    const double e2 = w.token_embedding.at(5, c) + w.position_embedding.at(1, c);
    EXPECT_NEAR(a1[c], (e1 + e2) / 2, 1e-15);
  }
  EXPECT_THROW(pd::avg_at_layer(m.encoder, two, 0), pd::ConfigError);
}

TEST(PackedBatch, MatchesPerSequenceForward) {
  auto m = tiny_model(tiny_config());
  auto qs = pd::testing::tiny_queries();
  auto fp = pd::model_forward(m, pd::pack<double>(qs), false);
  for (std::size_t b = 0; b < qs.size(); ++b) {
    auto single = pd::encoder_forward(m.encoder, qs[b]);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(fp.h.at(b, c), single.h_q[c], 1e-13);
  }
}

TEST(LayerInvocations, TwoPassCostsTwiceSinglePass) {
  for (auto mode : {pd::SelectionMode::kSinglePassAvg, pd::SelectionMode::kTwoPassCls}) {
    auto m = tiny_model(tiny_config(mode));
    m.pool = pd::PromptPool<double>(pd::PoolStrategy::kL2P, 8, 1, 4, 1);
    pd::Rng rng = pd::make_stream(1, "pool");
    pd::PoolConfig pc;
    pd::allocate_for_timestep<double>(*m.pool, 1, pc, nullptr, rng);
    auto qs = pd::testing::tiny_queries();
    m.encoder.reset_invocations();
    pd::model_forward(m, pd::pack<double>(qs), false);
    const std::uint64_t L = 3, B = qs.size();
    EXPECT_EQ(m.encoder.layer_invocations(), mode == pd::SelectionMode::kTwoPassCls ? 2 * L * B : L * B);
  }
}

TEST(EncoderWeights, DigestChangesOnAnyByte) {
  auto m = tiny_model(tiny_config());
  auto w = m.encoder.weights();
  const auto d = w.digest();
  w.layers[1].b2[3] += 1e-12;
  EXPECT_NE(w.digest(), d);
}
