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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "promptdsi/data.hpp"
#include "promptdsi/encoder.hpp"
#include "promptdsi/numerics.hpp"

namespace promptdsi {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("promptdsi-data-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "-" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

const CorpusTimeline& default_timeline() {
  static const CorpusTimeline tl = generate_corpora(SyntheticSpec{});
  return tl;
}

std::map<std::string, const DocumentRecord*> docs_by_id(const CorpusTimeline& tl) {
  std::map<std::string, const DocumentRecord*> out;
  for (const auto& c : tl.corpora)
    for (const auto& d : c.documents) out[d.doc_id] = &d;
  return out;
}

TEST(Synthetic, EntitiesAppearInEveryQuery) {
  SyntheticSpec spec;
  const auto& tl = default_timeline();
  auto docs = docs_by_id(tl);
  const int first = spec.first_entity_token();
  for (const auto& c : tl.corpora)
    for (const auto& q : c.queries) {
      const auto& doc = *docs.at(q.doc_id);
      std::set<int> doc_ents;
      for (int w : doc.tokens)
        if (w >= first) doc_ents.insert(w);
      ASSERT_EQ(doc_ents.size(), std::size_t(spec.entities_per_doc));
      int hit = 0;
      for (int w : q.tokens) {
        if (w >= first) EXPECT_TRUE(doc_ents.count(w)) << q.query_id;
        hit += doc_ents.count(w) ? 1 : 0;
      }
      EXPECT_GE(hit, 1) << q.query_id;
    }
}

TEST(Synthetic, EntitiesAreUniquePerDocument) {
  SyntheticSpec spec;
  std::map<int, std::string> owner;
  for (const auto& c : default_timeline().corpora)
    for (const auto& d : c.documents)
      for (int w : d.tokens)
        if (w >= spec.first_entity_token()) {
          auto [it, fresh] = owner.emplace(w, d.doc_id);
          EXPECT_TRUE(fresh || it->second == d.doc_id) << "token " << w;
        }
  EXPECT_EQ(owner.size(), std::size_t(spec.total_docs() * spec.entities_per_doc));
  for (const auto& [w, _] : owner) EXPECT_LT(w, spec.vocab_size);
}

TEST(Synthetic, CountsMatchTheSpecArithmetic) {
  SyntheticSpec spec;
  const auto& tl = default_timeline();
  ASSERT_EQ(tl.size(), 6u);
  std::size_t docs = 0, queries = 0, tests = 0, vals = 0, pseudo = 0;
  for (const auto& c : tl.corpora) {
    EXPECT_EQ(c.documents.size(), c.id == 0 ? 200u : 20u);
    docs += c.documents.size();
    queries += c.queries.size();
    for (const auto& q : c.queries) {
      tests += q.split == Split::kTest;
      vals += q.split == Split::kVal;
      pseudo += q.kind == QueryKind::kPseudo;
      if (q.split == Split::kTest) EXPECT_EQ(q.kind, QueryKind::kNatural);
    }
  }
  // 300 docs, 16 queries each: 10 pseudo + 2 train, 1 val and 3 test natural.
  EXPECT_EQ(docs, 300u);
  EXPECT_EQ(queries, 4800u);
  EXPECT_EQ(pseudo, 3000u);
  EXPECT_EQ(vals, 300u);
  EXPECT_EQ(tests, 900u);
  EXPECT_EQ(spec.natural_train(), 2);
}

TEST(Synthetic, DocidSetsAreDisjoint) {
  std::set<std::string> seen;
  for (const auto& c : default_timeline().corpora)
    for (const auto& d : c.documents) EXPECT_TRUE(seen.insert(d.doc_id).second);
}

TEST(Synthetic, NoTestQueryRepeatsATrainingQuery) {
  std::set<std::vector<int>> train;
  for (const auto& c : default_timeline().corpora)
    for (const auto& q : c.queries)
      if (q.split == Split::kTrain) train.insert(q.tokens);
  for (const auto& c : default_timeline().corpora)
    for (const auto& q : c.queries)
      if (q.split == Split::kTest) EXPECT_FALSE(train.count(q.tokens)) << q.query_id;
}

TEST(Synthetic, DeterministicBytes) {
  EXPECT_EQ(to_jsonl(generate_corpora(SyntheticSpec{})),
            to_jsonl(default_timeline()));
  SyntheticSpec other;
  other.seed = 2;
  EXPECT_NE(to_jsonl(generate_corpora(other)), to_jsonl(default_timeline()));
}

TEST(Synthetic, VocabularyExhaustionIsAConfigError) {
  SyntheticSpec spec;
  spec.vocab_size = 500;
  EXPECT_THROW(generate_corpora(spec), ConfigError);
}

// Mean of random token embeddings, then cosine nearest neighbour against the
// document means. Entity tokens make the task solvable without training.
TEST(Synthetic, BagOfEmbeddingsBaselineIsAboveHalf) {
  const auto& tl = default_timeline();
  EncoderConfig cfg;
  Rng rng = make_stream(1, "test.bag");
  auto w = EncoderWeights<double>::init(cfg, rng);
  const auto& emb = w.token_embedding;
  const std::size_t dim = emb.cols();
  auto mean = [&](const std::vector<int>& toks) {
    std::vector<double> m(dim, 0.0);
    for (int t : toks)
      for (std::size_t i = 0; i < dim; ++i) m[i] += emb.at(std::size_t(t), i);
    normalize_inplace<double>(m);
    return m;
  };
  const auto& d0 = tl.corpora[0];
  std::vector<std::vector<double>> docs;
  for (const auto& d : d0.documents) docs.push_back(mean(d.tokens));
  std::map<std::string, std::size_t> row;
  for (std::size_t i = 0; i < d0.documents.size(); ++i) row[d0.documents[i].doc_id] = i;
  std::size_t hits = 0, n = 0;
  for (const auto* q : d0.queries_in(Split::kTest)) {
    auto qv = mean(q->tokens);
    std::vector<std::pair<double, std::size_t>> s;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      double dot = 0;
      for (std::size_t c = 0; c < dim; ++c) dot += qv[c] * docs[i][c];
      s.emplace_back(-dot, i);
    }
    std::partial_sort(s.begin(), s.begin() + 10, s.end());
    const std::size_t gold = row.at(q->doc_id);
    for (int k = 0; k < 10; ++k) hits += s[std::size_t(k)].second == gold;
    ++n;
  }
  EXPECT_GT(double(hits) / double(n), 0.5);
}

TEST(Jsonl, RoundTripPlainAndGzip) {
  TempDir dir;
  for (const char* name : {"tl.jsonl", "tl.jsonl.gz"}) {
    save_jsonl(default_timeline(), dir.file(name));
    EXPECT_EQ(load_jsonl(dir.file(name)), default_timeline()) << name;
  }
  // The gzip file really is compressed.
  EXPECT_LT(fs::file_size(dir.file("tl.jsonl.gz")), fs::file_size(dir.file("tl.jsonl")) / 2);
}

TEST(Jsonl, EmptyFileIsAnEmptyTimeline) {
  TempDir dir;
  std::ofstream(dir.file("empty.jsonl")).close();
  EXPECT_TRUE(load_jsonl(dir.file("empty.jsonl")).empty());
}

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

TEST(Jsonl, DuplicateDocumentIsRejected) {
  TempDir dir;
  write(dir.file("dup.jsonl"),
        "{\"doc_id\":\"a\",\"corpus\":0,\"tokens\":[1]}\n"
        "{\"doc_id\":\"a\",\"corpus\":0,\"tokens\":[2]}\n");
  try {
    load_jsonl(dir.file("dup.jsonl"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Jsonl, MalformedRecordsNameTheLine) {
  TempDir dir;
  write(dir.file("bad.jsonl"), "{\"doc_id\":\"a\",\"corpus\":0,\"tokens\":[1]}\n\n{oops\n");
  try {
    load_jsonl(dir.file("bad.jsonl"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  write(dir.file("orphan.jsonl"),
        "{\"query_id\":\"q\",\"doc_id\":\"nope\",\"corpus\":0,\"split\":\"test\","
        "\"kind\":\"natural\",\"tokens\":[1]}\n");
  EXPECT_THROW(load_jsonl(dir.file("orphan.jsonl")), DataError);
  write(dir.file("gap.jsonl"), "{\"doc_id\":\"a\",\"corpus\":1,\"tokens\":[1]}\n");
  EXPECT_THROW(load_jsonl(dir.file("gap.jsonl")), DataError);
  EXPECT_THROW(load_jsonl(dir.file("missing.jsonl")), DataError);
}

}  // namespace
}  // namespace promptdsi
