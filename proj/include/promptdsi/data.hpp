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

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptdsi/encoder.hpp"
#include "promptdsi/errors.hpp"
#include "promptdsi/rng.hpp"

namespace promptdsi {

enum class Split { kTrain, kVal, kTest };
enum class QueryKind { kNatural, kPseudo };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}
inline std::string to_string(QueryKind k) { return k == QueryKind::kNatural ? "natural" : "pseudo"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + s + "'");
}
inline QueryKind kind_from_string(const std::string& s) {
  if (s == "natural") return QueryKind::kNatural;
  if (s == "pseudo") return QueryKind::kPseudo;
  throw DataError("unknown query kind '" + s + "'");
}

struct DocumentRecord {
  std::string doc_id;
  int corpus = 0;
  std::vector<int> tokens;
  friend bool operator==(const DocumentRecord&, const DocumentRecord&) = default;
};

/// Query tokens exclude [CLS]; with_cls() prepends it for the encoder.
struct QueryRecord {
  std::string query_id;
  std::string doc_id;
  int corpus = 0;
  Split split = Split::kTrain;
  QueryKind kind = QueryKind::kNatural;
  std::vector<int> tokens;
  friend bool operator==(const QueryRecord&, const QueryRecord&) = default;
};

inline std::vector<int> with_cls(const std::vector<int>& tokens) {
  std::vector<int> out;
  out.reserve(tokens.size() + 1);
  out.push_back(kClsToken);
  out.insert(out.end(), tokens.begin(), tokens.end());
  return out;
}

struct Corpus {
  int id = 0;
  std::vector<DocumentRecord> documents;
  std::vector<QueryRecord> queries;

  std::vector<const QueryRecord*> queries_in(Split split) const {
    std::vector<const QueryRecord*> out;
    for (const auto& q : queries)
      if (q.split == split) out.push_back(&q);
    return out;
  }
  std::vector<std::string> doc_ids() const {
    std::vector<std::string> out;
    for (const auto& d : documents) out.push_back(d.doc_id);
    return out;
  }
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// D_0 .. D_T in arrival order.
struct CorpusTimeline {
  std::vector<Corpus> corpora;
  std::size_t size() const { return corpora.size(); }
  bool empty() const { return corpora.empty(); }
  int last_timestep() const { return int(corpora.size()) - 1; }
  friend bool operator==(const CorpusTimeline&, const CorpusTimeline&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic topic-structured corpora
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int vocab_size = 1024;
  int num_topics = 8;
  int terms_per_topic = 24;
  int common_terms = 32;
  int docs_initial = 200;
  int docs_per_increment = 20;
  int increments = 5;
  int entities_per_doc = 2;
  int body_length = 40;
  int natural_queries_per_doc = 6;
  int pseudo_queries_per_doc = 10;
  double train_fraction = 0.34;  // of natural queries; the rest after val is test
  double val_fraction = 0.17;
  double common_rate = 0.15;  // share of background words in a body
  int min_query_terms = 3;
  int max_query_terms = 8;
  std::uint64_t seed = 1;

  int total_docs() const { return docs_initial + docs_per_increment * increments; }
  int first_entity_token() const { return 1 + common_terms + num_topics * terms_per_topic; }
  int natural_train() const { return int(std::lround(natural_queries_per_doc * train_fraction)); }
  int natural_val() const { return int(std::lround(natural_queries_per_doc * val_fraction)); }
  int natural_test() const { return natural_queries_per_doc - natural_train() - natural_val(); }
  int max_query_length() const { return 2 + max_query_terms; }

  void validate() const {
    PROMPTDSI_REQUIRE(num_topics >= 1 && terms_per_topic >= 1 && common_terms >= 0, ConfigError,
                      "topic structure must be non-empty");
    PROMPTDSI_REQUIRE(docs_initial >= 1 && docs_per_increment >= 1 && increments >= 1,
                      ConfigError, "need D_0 and at least one increment");
    PROMPTDSI_REQUIRE(entities_per_doc >= 1, ConfigError, "every doc needs an entity token");
    PROMPTDSI_REQUIRE(min_query_terms >= 1 && max_query_terms >= min_query_terms, ConfigError,
                      "query term range is empty");
    PROMPTDSI_REQUIRE(body_length >= max_query_terms, ConfigError,
                      "body shorter than the longest query");
    PROMPTDSI_REQUIRE(train_fraction >= 0 && val_fraction >= 0 && train_fraction + val_fraction <= 1,
                      ConfigError, "split fractions must lie in [0, 1]");
    PROMPTDSI_REQUIRE(natural_test() >= 1, ConfigError, "no natural test queries per document");
    PROMPTDSI_REQUIRE(common_rate >= 0 && common_rate < 1, ConfigError, "common_rate in [0, 1)");
    const long needed = long(first_entity_token()) + long(total_docs()) * entities_per_doc;
    if (needed > vocab_size)
      throw ConfigError("vocabulary exhausted: need " + std::to_string(needed) +
                        " token ids, vocab_size is " + std::to_string(vocab_size));
  }
};

namespace detail {

inline std::string padded(int v, int width = 4) {
  std::string s = std::to_string(v);
  return std::string(std::size_t(std::max(0, width - int(s.size()))), '0') + s;
}

struct DocSketch {
  std::vector<int> entities;
  std::vector<int> terms;  // non-entity body tokens
};

inline std::vector<int> sample_query(const DocSketch& doc, const SyntheticSpec& spec, Rng& rng) {
  std::vector<int> q;
  const int n_ent = std::min<int>(int(doc.entities.size()),
                                  std::uniform_int_distribution<int>(1, 2)(rng));
  std::vector<int> ents = doc.entities;
  std::shuffle(ents.begin(), ents.end(), rng);
  q.insert(q.end(), ents.begin(), ents.begin() + n_ent);
  const int n_terms =
      std::uniform_int_distribution<int>(spec.min_query_terms, spec.max_query_terms)(rng);
  std::uniform_int_distribution<std::size_t> pick(0, doc.terms.size() - 1);
  for (int i = 0; i < n_terms; ++i) q.push_back(doc.terms[pick(rng)]);
  std::shuffle(q.begin(), q.end(), rng);
  return q;
}

}  // namespace detail

/// Each document: a latent topic, a body drawn from that topic's Zipf term
/// distribution mixed with background words, and globally unique entity
/// tokens. Each query: 1-2 of the doc's entities plus 3-8 body terms.
/// Pseudo queries come from a separate stream (the query-generator stand-in).
inline CorpusTimeline generate_corpora(const SyntheticSpec& spec) {
  spec.validate();
  CorpusTimeline tl;
  const int first_topic_term = 1 + spec.common_terms;
  std::vector<double> zipf(std::size_t(spec.terms_per_topic));
  for (std::size_t r = 0; r < zipf.size(); ++r) zipf[r] = 1.0 / double(r + 1);

  int global_doc = 0;
  for (int c = 0; c <= spec.increments; ++c) {
    Corpus corpus;
    corpus.id = c;
    const int n_docs = c == 0 ? spec.docs_initial : spec.docs_per_increment;
    for (int d = 0; d < n_docs; ++d, ++global_doc) {
      Rng rng = make_stream(spec.seed, "data.doc", std::uint64_t(global_doc));
      const int topic = std::uniform_int_distribution<int>(0, spec.num_topics - 1)(rng);
      std::discrete_distribution<int> term_dist(zipf.begin(), zipf.end());
      std::bernoulli_distribution background(spec.common_rate);
      detail::DocSketch sketch;
      for (int e = 0; e < spec.entities_per_doc; ++e)
        sketch.entities.push_back(spec.first_entity_token() + global_doc * spec.entities_per_doc + e);
      for (int i = 0; i < spec.body_length; ++i) {
        if (spec.common_terms > 0 && background(rng))
          sketch.terms.push_back(
              1 + std::uniform_int_distribution<int>(0, spec.common_terms - 1)(rng));
        else
          sketch.terms.push_back(first_topic_term + topic * spec.terms_per_topic + term_dist(rng));
      }
      DocumentRecord doc;
      doc.doc_id = "d" + std::to_string(c) + "-" + detail::padded(d);
      doc.corpus = c;
      doc.tokens = sketch.terms;
      doc.tokens.insert(doc.tokens.end(), sketch.entities.begin(), sketch.entities.end());
      std::shuffle(doc.tokens.begin(), doc.tokens.end(), rng);

      std::set<std::vector<int>> train_seqs;
      auto make = [&](Split split, QueryKind kind, int k, Rng& r) {
        QueryRecord q;
        q.doc_id = doc.doc_id;
        q.corpus = c;
        q.split = split;
        q.kind = kind;
        q.query_id = "q" + std::to_string(c) + "-" + detail::padded(d) +
                     (kind == QueryKind::kNatural ? "-n" : "-p") + std::to_string(k);
        q.tokens = detail::sample_query(sketch, spec, r);
        if (split == Split::kTest) {
          // A test query never repeats a training query verbatim.
          for (int tries = 0; train_seqs.count(q.tokens) && tries < 256; ++tries)
            q.tokens = detail::sample_query(sketch, spec, r);
          if (train_seqs.count(q.tokens))
            throw DataError("could not draw a test query distinct from training queries");
        }
        if (split == Split::kTrain) train_seqs.insert(q.tokens);
        return q;
      };
      Rng pseudo_rng = make_stream(spec.seed, "data.pseudo", std::uint64_t(global_doc));
      Rng natural_rng = make_stream(spec.seed, "data.natural", std::uint64_t(global_doc));
      std::vector<QueryRecord> natural;
      for (int k = 0; k < spec.pseudo_queries_per_doc; ++k)
        corpus.queries.push_back(make(Split::kTrain, QueryKind::kPseudo, k, pseudo_rng));
      for (int k = 0; k < spec.natural_queries_per_doc; ++k) {
        const Split split = k < spec.natural_train() ? Split::kTrain
                            : k < spec.natural_train() + spec.natural_val() ? Split::kVal
                                                                            : Split::kTest;
        corpus.queries.push_back(make(split, QueryKind::kNatural, k, natural_rng));
      }
      corpus.documents.push_back(std::move(doc));
    }
    tl.corpora.push_back(std::move(corpus));
  }
  return tl;
}

// ---------------------------------------------------------------------------
// JSONL persistence (gzip when the path ends in .gz)
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_gzip_path(const std::string& path) {
  return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

class LineReader {
 public:
  explicit LineReader(const std::string& path) : gz_(is_gzip_path(path)) {
    if (gz_) {
      gzf_ = gzopen(path.c_str(), "rb");
      if (!gzf_) throw DataError("cannot open " + path);
    } else {
      in_.open(path);
      if (!in_) throw DataError("cannot open " + path);
    }
  }
  ~LineReader() {
    if (gzf_) gzclose(gzf_);
  }
  LineReader(const LineReader&) = delete;
  LineReader& operator=(const LineReader&) = delete;

  bool next(std::string& line) {
    if (!gz_) return bool(std::getline(in_, line));
    line.clear();
    char buf[4096];
    while (gzgets(gzf_, buf, sizeof(buf))) {
      line += buf;
      if (!line.empty() && line.back() == '\n') {
        line.pop_back();
        return true;
      }
    }
    return !line.empty();
  }

 private:
  bool gz_;
  std::ifstream in_;
  gzFile gzf_ = nullptr;
};

inline void write_text(const std::string& path, const std::string& text) {
  if (is_gzip_path(path)) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot write " + path);
    if (!text.empty() && gzwrite(f, text.data(), unsigned(text.size())) == 0) {
      gzclose(f);
      throw DataError("gzip write failed for " + path);
    }
    gzclose(f);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

}  // namespace detail

/// Documents first (by corpus), then queries, one JSON object per line.
inline std::string to_jsonl(const CorpusTimeline& tl) {
  std::string out;
  for (const auto& c : tl.corpora)
    for (const auto& d : c.documents) {
      nlohmann::ordered_json j;
      j["doc_id"] = d.doc_id;
      j["corpus"] = d.corpus;
      j["tokens"] = d.tokens;
      out += j.dump() + "\n";
    }
  for (const auto& c : tl.corpora)
    for (const auto& q : c.queries) {
      nlohmann::ordered_json j;
      j["query_id"] = q.query_id;
      j["doc_id"] = q.doc_id;
      j["corpus"] = q.corpus;
      j["split"] = to_string(q.split);
      j["kind"] = to_string(q.kind);
      j["tokens"] = q.tokens;
      out += j.dump() + "\n";
    }
  return out;
}

inline void save_jsonl(const CorpusTimeline& tl, const std::string& path) {
  detail::write_text(path, to_jsonl(tl));
}

inline CorpusTimeline load_jsonl(const std::string& path) {
  detail::LineReader reader(path);
  std::map<int, Corpus> by_id;
  std::map<std::string, int> doc_corpus;
  std::set<std::string> query_ids;
  std::string line;
  std::size_t line_no = 0;
  while (reader.next(line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (!j.is_object()) throw DataError("record is not an object");
      const int corpus = j.at("corpus").get<int>();
      if (corpus < 0) throw DataError("negative corpus id");
      auto tokens = j.at("tokens").get<std::vector<int>>();
      Corpus& c = by_id[corpus];
      c.id = corpus;
      if (j.contains("query_id")) {
        QueryRecord q;
        q.query_id = j.at("query_id").get<std::string>();
        q.doc_id = j.at("doc_id").get<std::string>();
        q.corpus = corpus;
        q.split = split_from_string(j.at("split").get<std::string>());
        q.kind = kind_from_string(j.at("kind").get<std::string>());
        q.tokens = std::move(tokens);
        auto it = doc_corpus.find(q.doc_id);
        if (it == doc_corpus.end()) throw DataError("query refers to unknown document '" + q.doc_id + "'");
        if (it->second != corpus) throw DataError("query corpus differs from its document's");
        if (!query_ids.insert(q.query_id).second)
          throw DataError("duplicate query id '" + q.query_id + "'");
        c.queries.push_back(std::move(q));
      } else {
        DocumentRecord d;
        d.doc_id = j.at("doc_id").get<std::string>();
        d.corpus = corpus;
        d.tokens = std::move(tokens);
        if (!doc_corpus.emplace(d.doc_id, corpus).second)
          throw DataError("duplicate document id '" + d.doc_id + "'");
        c.documents.push_back(std::move(d));
      }
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + "malformed record: " + e.what());
    }
  }
  CorpusTimeline tl;
  int expect = 0;
  for (auto& [id, c] : by_id) {
    if (id != expect) throw DataError(path + ": corpus ids must be contiguous from 0");
    ++expect;
    tl.corpora.push_back(std::move(c));
  }
  return tl;
}

}  // namespace promptdsi
