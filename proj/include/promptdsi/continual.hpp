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

#include <chrono>
#include <cstdlib>
#include <functional>
#include <optional>
#include <string>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

#include "promptdsi/data.hpp"
#include "promptdsi/eval.hpp"
#include "promptdsi/model.hpp"
#include "promptdsi/topics.hpp"

namespace promptdsi {

enum class StrategyTag {
  kSeqFt,
  kReplayFt,
  kFrozenCls,
  kCachedCentroid,
  kPromptL2P,
  kPromptSPP,
  kPromptCODA,
  kPromptTopic,
  kNaiveL2P,
  kNaiveSPP,
  kNaiveCODA,
  kNaiveTopic,
  kMulti,
  kJoint,
};

inline const std::vector<std::pair<StrategyTag, std::string>>& strategy_names() {
  static const std::vector<std::pair<StrategyTag, std::string>> names = {
      {StrategyTag::kSeqFt, "SEQ_FT"},
      {StrategyTag::kReplayFt, "REPLAY_FT"},
      {StrategyTag::kFrozenCls, "FROZEN_CLS"},
      {StrategyTag::kCachedCentroid, "CACHED_CENTROID"},
      {StrategyTag::kPromptL2P, "PROMPTDSI_L2P"},
      {StrategyTag::kPromptSPP, "PROMPTDSI_SPP"},
      {StrategyTag::kPromptCODA, "PROMPTDSI_CODA"},
      {StrategyTag::kPromptTopic, "PROMPTDSI_TOPIC"},
      {StrategyTag::kNaiveL2P, "NAIVE_PROMPTDSI_L2P"},
      {StrategyTag::kNaiveSPP, "NAIVE_PROMPTDSI_SPP"},
      {StrategyTag::kNaiveCODA, "NAIVE_PROMPTDSI_CODA"},
      {StrategyTag::kNaiveTopic, "NAIVE_PROMPTDSI_TOPIC"},
      {StrategyTag::kMulti, "MULTI"},
      {StrategyTag::kJoint, "JOINT"},
  };
  return names;
}

inline std::string to_string(StrategyTag s) {
  for (const auto& [tag, name] : strategy_names())
    if (tag == s) return name;
  return "?";
}

inline StrategyTag strategy_from_string(const std::string& s) {
  for (const auto& [tag, name] : strategy_names())
    if (name == s) return tag;
  throw ConfigError("unknown strategy '" + s + "'");
}

inline bool is_naive(StrategyTag s) {
  return s == StrategyTag::kNaiveL2P || s == StrategyTag::kNaiveSPP ||
         s == StrategyTag::kNaiveCODA || s == StrategyTag::kNaiveTopic;
}

inline bool is_prompt_strategy(StrategyTag s) {
  return is_naive(s) || s == StrategyTag::kPromptL2P || s == StrategyTag::kPromptSPP ||
         s == StrategyTag::kPromptCODA || s == StrategyTag::kPromptTopic;
}

inline PoolStrategy pool_strategy(StrategyTag s) {
  switch (s) {
    case StrategyTag::kPromptL2P:
    case StrategyTag::kNaiveL2P: return PoolStrategy::kL2P;
    case StrategyTag::kPromptSPP:
    case StrategyTag::kNaiveSPP: return PoolStrategy::kSPP;
    case StrategyTag::kPromptCODA:
    case StrategyTag::kNaiveCODA: return PoolStrategy::kCODA;
    case StrategyTag::kPromptTopic:
    case StrategyTag::kNaiveTopic: return PoolStrategy::kTopic;
    default: throw ConfigError(to_string(s) + " has no prompt pool");
  }
}

/// The single-pass twin of a naive strategy, and vice versa.
inline StrategyTag toggle_selection(StrategyTag s) {
  switch (s) {
    case StrategyTag::kPromptL2P: return StrategyTag::kNaiveL2P;
    case StrategyTag::kPromptSPP: return StrategyTag::kNaiveSPP;
    case StrategyTag::kPromptCODA: return StrategyTag::kNaiveCODA;
    case StrategyTag::kPromptTopic: return StrategyTag::kNaiveTopic;
    case StrategyTag::kNaiveL2P: return StrategyTag::kPromptL2P;
    case StrategyTag::kNaiveSPP: return StrategyTag::kPromptSPP;
    case StrategyTag::kNaiveCODA: return StrategyTag::kPromptCODA;
    case StrategyTag::kNaiveTopic: return StrategyTag::kPromptTopic;
    default: return s;
  }
}

/// PromptDSI variants train only new parameters and never look back.
inline bool is_rehearsal_free(StrategyTag s) { return is_prompt_strategy(s); }

struct TrainConfig {
  int base_epochs = 30;
  double base_lr = 2e-3;
  int epochs = 10;           // continual baselines per timestep
  double lr = 1e-3;          // full fine-tuning baselines
  double head_lr = 1e-2;     // frozen-encoder baselines and PromptDSI
  int prompt_epoch_factor = 2;
  int refine_epochs = 10;    // CACHED_CENTROID
  int batch_size = 32;
  int replay_every = 4;      // one replay batch per this many new batches
  double weight_decay = 0.01;
  int eval_batch = 256;
  int eval_k = 10;
  int num_topics = 8;
  bool audit_every_step = true;

  int prompt_epochs() const { return epochs * prompt_epoch_factor; }

  void validate() const {
    PROMPTDSI_REQUIRE(base_epochs >= 0 && epochs >= 0 && refine_epochs >= 0, ConfigError,
                      "epoch counts must be non-negative");
    PROMPTDSI_REQUIRE(prompt_epoch_factor >= 1, ConfigError, "prompt_epoch_factor must be >= 1");
    PROMPTDSI_REQUIRE(base_lr >= 0 && lr >= 0 && head_lr >= 0, ConfigError,
                      "learning rates must be non-negative");
    PROMPTDSI_REQUIRE(batch_size >= 1 && eval_batch >= 1, ConfigError, "batch sizes must be >= 1");
    PROMPTDSI_REQUIRE(replay_every >= 1, ConfigError, "replay_every must be >= 1");
    PROMPTDSI_REQUIRE(eval_k >= 1, ConfigError, "eval_k must be >= 1");
    PROMPTDSI_REQUIRE(num_topics >= 1, ConfigError, "num_topics must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Access-tracked data store
// ---------------------------------------------------------------------------

enum class AccessPurpose { kTraining, kReplay, kCache, kEvaluation, kRegistration };

inline std::string to_string(AccessPurpose p) {
  switch (p) {
    case AccessPurpose::kTraining: return "training";
    case AccessPurpose::kReplay: return "replay";
    case AccessPurpose::kCache: return "cache";
    case AccessPurpose::kEvaluation: return "evaluation";
    case AccessPurpose::kRegistration: return "registration";
  }
  return "?";
}

/// Every read goes through here. In rehearsal-free mode, any non-evaluation
/// read of a corpus older than the current timestep is a contract violation.
class CorpusStore {
 public:
  struct Access {
    int timestep;
    int corpus;
    AccessPurpose purpose;
  };

  explicit CorpusStore(const CorpusTimeline& timeline) : tl_(&timeline) {}

  void begin_timestep(int t, bool rehearsal_free) {
    t_ = t;
    rehearsal_free_ = rehearsal_free;
  }
  int timestep() const { return t_; }
  std::size_t num_corpora() const { return tl_->size(); }

  std::vector<const QueryRecord*> training_queries(int corpus) {
    touch(corpus, AccessPurpose::kTraining);
    return corpus_at(corpus).queries_in(Split::kTrain);
  }
  /// Training pseudo-queries only.
  std::vector<const QueryRecord*> replay_queries(int corpus) {
    touch(corpus, AccessPurpose::kReplay);
    std::vector<const QueryRecord*> out;
    for (const auto* q : corpus_at(corpus).queries_in(Split::kTrain))
      if (q->kind == QueryKind::kPseudo) out.push_back(q);
    return out;
  }
  std::vector<const QueryRecord*> cache_queries(int corpus) {
    touch(corpus, AccessPurpose::kCache);
    return corpus_at(corpus).queries_in(Split::kTrain);
  }
  std::vector<const QueryRecord*> test_queries(int corpus) {
    touch(corpus, AccessPurpose::kEvaluation);
    return corpus_at(corpus).queries_in(Split::kTest);
  }
  std::vector<const QueryRecord*> val_queries(int corpus) {
    touch(corpus, AccessPurpose::kEvaluation);
    return corpus_at(corpus).queries_in(Split::kVal);
  }
  std::vector<std::string> doc_ids(int corpus) {
    touch(corpus, AccessPurpose::kRegistration);
    return corpus_at(corpus).doc_ids();
  }

  const std::vector<Access>& log() const { return log_; }

  /// Non-evaluation reads of D_{<t} made at timesteps t >= 1.
  std::size_t backward_reads(int from_timestep = 1) const {
    std::size_t n = 0;
    for (const auto& a : log_)
      if (a.timestep >= from_timestep && a.corpus < a.timestep &&
          a.purpose != AccessPurpose::kEvaluation)
        ++n;
    return n;
  }

 private:
  const Corpus& corpus_at(int corpus) const {
    PROMPTDSI_REQUIRE(corpus >= 0 && std::size_t(corpus) < tl_->size(), IndexError,
                      "corpus " + std::to_string(corpus) + " not in the timeline");
    return tl_->corpora[std::size_t(corpus)];
  }
  void touch(int corpus, AccessPurpose p) {
    if (rehearsal_free_ && t_ >= 1 && corpus < t_ && p != AccessPurpose::kEvaluation)
      throw ContractError("rehearsal-free strategy read " + to_string(p) + " records of D_" +
                          std::to_string(corpus) + " at t=" + std::to_string(t_));
    log_.push_back({t_, corpus, p});
  }

  const CorpusTimeline* tl_;
  int t_ = 0;
  bool rehearsal_free_ = false;
  std::vector<Access> log_;
};

/// Z: one mean training-query embedding per docid, append-only.
template <class T>
class CentroidCache {
 public:
  explicit CentroidCache(std::size_t dim) : dim_(dim) {}
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return rows_.size() / dim_; }
  void append(const Tensor<T>& rows) {
    PROMPTDSI_REQUIRE(rows.cols() == dim_, ContractError, "cache rows must be n x dim");
    rows_.insert(rows_.end(), rows.data(), rows.data() + rows.size());
  }
  std::span<const T> row(std::size_t docid) const {
    ++reads_;
    return std::span<const T>(rows_).subspan(docid * dim_, dim_);
  }
  std::size_t reads() const { return reads_; }

 private:
  std::size_t dim_;
  std::vector<T> rows_;
  mutable std::size_t reads_ = 0;
};

// ---------------------------------------------------------------------------
// Freeze audit
// ---------------------------------------------------------------------------

/// Digests of every tensor that must not move during a step.
template <class T>
class FreezeAudit {
 public:
  void snapshot(const DsiModel<T>& model, const TrainableSet& ts) {
    entries_.clear();
    if (!ts.encoder) entries_.push_back({"encoder", model.encoder.weights().digest()});
    for (std::size_t s = 0; s < model.classifier.num_segments(); ++s)
      if (s >= ts.segments.size() || !ts.segments[s])
        entries_.push_back({"classifier.segment" + std::to_string(s),
                            digest(model.classifier.segment(s))});
    if (model.pool)
      for (std::size_t i = 0; i < model.pool->size(); ++i) {
        const auto& e = model.pool->entry(i);
        const std::string base = "pool." + std::to_string(i) + ".";
        if (e.frozen || !ts.pool) {
          entries_.push_back({base + "prompt", digest(e.prompt)});
          entries_.push_back({base + "attention", digest(e.attention)});
        }
        if (e.frozen || e.key_frozen || !ts.pool) entries_.push_back({base + "key", digest(e.key)});
      }
  }

  /// Throws ContractError naming the first tensor that changed.
  void verify(const DsiModel<T>& model) {
    ++checks_;
    for (const auto& [name, d] : entries_) {
      if (current(model, name) != d) throw ContractError("frozen tensor changed: " + name);
    }
  }

  std::size_t checks() const { return checks_; }
  std::size_t tracked() const { return entries_.size(); }

 private:
  static std::uint64_t current(const DsiModel<T>& model, const std::string& name) {
    if (name == "encoder") return model.encoder.weights().digest();
    if (name.rfind("classifier.segment", 0) == 0)
      return digest(model.classifier.segment(std::stoul(name.substr(18))));
    const auto dot1 = name.find('.', 5);
    const auto& e = model.pool->entry(std::stoul(name.substr(5, dot1 - 5)));
    const std::string field = name.substr(dot1 + 1);
    if (field == "prompt") return digest(e.prompt);
    if (field == "attention") return digest(e.attention);
    return digest(e.key);
  }

  std::vector<std::pair<std::string, std::uint64_t>> entries_;
  std::size_t checks_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct Example {
  std::vector<int> tokens;  // with [CLS]
  int docid = 0;
};

inline std::vector<Example> make_examples(const std::vector<const QueryRecord*>& queries,
                                          const DocidRegistry& registry) {
  std::vector<Example> out;
  out.reserve(queries.size());
  for (const auto* q : queries) out.push_back({with_cls(q->tokens), registry.docid(q->doc_id)});
  return out;
}

struct LoopConfig {
  int epochs = 1;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 32;
  double match_weight = 1.0;
  int replay_every = 0;  // 0 = no replay
  bool audit_every_step = true;
};

struct LoopLog {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::size_t steps = 0;
  std::size_t replay_steps = 0;
  std::size_t audits = 0;
};

template <class T>
LoopLog train_loop(DsiModel<T>& model, const std::vector<Example>& data, const TrainableSet& ts,
                   const LoopConfig& lc, Rng& shuffle_rng,
                   const std::vector<Example>* replay = nullptr, Rng* replay_rng = nullptr) {
  LoopLog log;
  if (data.empty() || lc.epochs == 0) return log;
  AdamWConfig ac;
  ac.learning_rate = lc.lr;
  ac.weight_decay = lc.weight_decay;
  OptimizerState<T> opt;
  opt.config = ac;
  FreezeAudit<T> audit;
  audit.snapshot(model, ts);

  auto step = [&](const std::vector<const Example*>& batch) -> double {
    std::vector<std::vector<int>> seqs;
    std::vector<int> targets;
    for (const auto* e : batch) {
      seqs.push_back(e->tokens);
      targets.push_back(e->docid);
    }
    auto res = dsi_loss<T>(model, seqs, targets, ts, lc.match_weight, true);
    auto params = collect_params(model, res.grads);
    adamw_step<T>(params, opt);
    if (model.pool) model.pool->mark_modified();
    ++log.steps;
    if (lc.audit_every_step) audit.verify(model);
    return double(res.loss);
  };

  std::vector<std::size_t> order(data.size());
  for (int ep = 0; ep < lc.epochs; ++ep) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0;
    std::size_t n = 0;
    std::size_t new_batches = 0;
    for (std::size_t b = 0; b < order.size(); b += std::size_t(lc.batch_size)) {
      std::vector<const Example*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + std::size_t(lc.batch_size)); ++i)
        batch.push_back(&data[order[i]]);
      sum += step(batch);
      ++n;
      ++new_batches;
      if (replay && !replay->empty() && lc.replay_every > 0 &&
          new_batches % std::size_t(lc.replay_every) == 0) {
        std::vector<std::size_t> idx(replay->size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), *replay_rng);
        std::vector<const Example*> rb;
        for (std::size_t i = 0; i < std::min(idx.size(), std::size_t(lc.batch_size)); ++i)
          rb.push_back(&(*replay)[idx[i]]);
        step(rb);
        ++log.replay_steps;
      }
    }
    log.epoch_loss.push_back(n ? sum / double(n) : 0.0);
  }
  if (!lc.audit_every_step) audit.verify(model);
  log.audits = audit.checks();
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct CorpusMetrics {
  int corpus = 0;
  std::size_t queries = 0;
  double hits1 = 0, hits10 = 0, mrr10 = 0;
};

inline int eval_threads() {
  if (const char* v = std::getenv("PROMPTDSI_THREADS")) {
    const int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return 1;
}

/// Ranks every query and macro-averages per corpus. Selection logs record
/// the chosen prompt ids (CODA: the entry with the largest weight).
template <class T>
CorpusMetrics evaluate_queries(const DsiModel<T>& model, const DocidRegistry& registry,
                               const std::vector<const QueryRecord*>& queries, int corpus,
                               const TrainConfig& tc,
                               std::vector<SelectionLogEntry<T>>* selection_log = nullptr) {
  CorpusMetrics m;
  m.corpus = corpus;
  m.queries = queries.size();
  if (queries.empty()) return m;
  const std::size_t k = std::min<std::size_t>(std::size_t(tc.eval_k), model.classifier.total_docs());
  for (std::size_t b = 0; b < queries.size(); b += std::size_t(tc.eval_batch)) {
    const std::size_t e = std::min(queries.size(), b + std::size_t(tc.eval_batch));
    std::vector<std::vector<int>> seqs;
    for (std::size_t i = b; i < e; ++i) seqs.push_back(with_cls(queries[i]->tokens));
    auto fp = embed_queries(model, std::span<const std::vector<int>>(seqs));
    Tensor<T> logits = model.classifier.logits(fp.h);
    for (std::size_t i = b; i < e; ++i) {
      const std::size_t r = i - b;
      auto ranked = rank_scores<T>(logits.row(r), k);
      const int gold = registry.docid(queries[i]->doc_id);
      m.hits1 += hits_at_k(ranked, gold, 1);
      m.hits10 += hits_at_k(ranked, gold, 10);
      m.mrr10 += mrr_at_k(ranked, gold, 10);
      if (selection_log && model.prompting()) {
        SelectionLogEntry<T> le;
        le.corpus = corpus;
        le.query_id = queries[i]->query_id;
        if (!fp.selections.empty()) {
          le.prompt_ids = fp.selections[r].ids;
          le.distances = fp.selections[r].distances;
        } else if (!fp.composed.empty()) {
          const auto& a = fp.composed[r].alphas;
          const auto best = std::size_t(std::max_element(a.begin(), a.end()) - a.begin());
          le.prompt_ids = {best};
          le.distances = {T(1) - a[best]};
        }
        selection_log->push_back(std::move(le));
      }
    }
  }
  const double n = double(queries.size());
  m.hits1 /= n;
  m.hits10 /= n;
  m.mrr10 /= n;
  return m;
}

/// Test sets Q_0..Q_t, optionally fanned out over PROMPTDSI_THREADS threads.
template <class T>
std::vector<CorpusMetrics> evaluate_row(const DsiModel<T>& model, const DocidRegistry& registry,
                                        CorpusStore& store, int t, const TrainConfig& tc,
                                        std::vector<SelectionLogEntry<T>>* selection_log = nullptr) {
  std::vector<std::vector<const QueryRecord*>> sets;
  for (int i = 0; i <= t; ++i) sets.push_back(store.test_queries(i));
  std::vector<CorpusMetrics> out(sets.size());
  std::vector<std::vector<SelectionLogEntry<T>>> logs(sets.size());
  const int threads = std::min<int>(eval_threads(), int(sets.size()));
  auto work = [&](std::size_t i) {
    out[i] = evaluate_queries(model, registry, sets[i], int(i), tc, selection_log ? &logs[i] : nullptr);
  };
  if (threads <= 1) {
    for (std::size_t i = 0; i < sets.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i; (i = next++) < sets.size();) work(i);
        } catch (...) {
          errors[std::size_t(w)] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  if (selection_log)
    for (auto& l : logs) selection_log->insert(selection_log->end(), l.begin(), l.end());
  return out;
}

// ---------------------------------------------------------------------------
// Index state and timesteps
// ---------------------------------------------------------------------------

template <class T>
struct IndexState {
  DsiModel<T> model;
  DocidRegistry registry;
  std::optional<TopicModel<T>> topics;
  std::optional<CentroidCache<T>> cache;
  int timestep = 0;
};

struct TrainReport {
  int timestep = 0;
  std::string strategy;
  int epochs = 0;
  double learning_rate = 0;
  std::size_t steps = 0;
  std::size_t replay_steps = 0;
  std::vector<double> epoch_loss;
  double pre_hits10 = 0;   // P_{t,t} before any update at t
  double post_hits10 = 0;  // P_{t,t} after training
  std::string encoder_digest_before, encoder_digest_after;
  std::size_t frozen_tensors = 0;
  std::size_t audits = 0;
  std::uint64_t layer_invocations = 0;  // training forwards only
  std::vector<TrainableRecord> trainable;
  double seconds = 0;
};

/// Trainable tensor inventory implied by a TrainableSet.
template <class T>
std::vector<TrainableRecord> trainable_records(const DsiModel<T>& model, const TrainableSet& ts,
                                               int t) {
  std::vector<TrainableRecord> out;
  if (ts.encoder)
    model.encoder.weights().for_each([&](const std::string& name, const Tensor<T>& v) {
      out.push_back({"encoder." + name, v.size(), t});
    });
  for (std::size_t s = 0; s < ts.segments.size(); ++s)
    if (ts.segments[s])
      out.push_back({"classifier.segment" + std::to_string(s), model.classifier.segment(s).size(), t});
  if (ts.pool && model.pool) {
    const auto strat = model.pool->strategy();
    for (std::size_t i = 0; i < model.pool->size(); ++i) {
      const auto& e = model.pool->entry(i);
      if (e.frozen) continue;
      const std::string base = "pool." + std::to_string(i) + ".";
      out.push_back({base + "prompt", e.prompt.size(), t});
      const bool key_learns = (strat == PoolStrategy::kL2P || strat == PoolStrategy::kSPP ||
                               strat == PoolStrategy::kCODA) && !e.key_frozen;
      if (key_learns) out.push_back({base + "key", e.key.size(), t});
      if (strat == PoolStrategy::kCODA) out.push_back({base + "attention", e.attention.size(), t});
    }
  }
  return out;
}

/// Fresh model, full training on D_0 train queries (cross entropy over D_0).
template <class T>
IndexState<T> train_initial(CorpusStore& store, const EncoderConfig& enc_cfg, const TrainConfig& tc,
                            std::uint64_t seed, TrainReport* report = nullptr) {
  enc_cfg.validate();
  tc.validate();
  store.begin_timestep(0, false);
  IndexState<T> st;
  Rng init = make_stream(seed, "init");
  EncoderConfig base_cfg = enc_cfg;
  st.model.encoder = Encoder<T>(base_cfg, EncoderWeights<T>::init(base_cfg, init));
  st.model.classifier = Classifier<T>(std::size_t(enc_cfg.dim));
  const auto ids = store.doc_ids(0);
  st.registry.add_segment(0, ids);
  Rng cls_rng = make_stream(seed, "init.classifier", 0);
  expand_classifier(st.model.classifier, ids.size(), cls_rng);

  const auto data = make_examples(store.training_queries(0), st.registry);
  TrainableSet ts;
  ts.encoder = true;
  ts.segments = {true};
  LoopConfig lc;
  lc.epochs = tc.base_epochs;
  lc.lr = tc.base_lr;
  lc.weight_decay = tc.weight_decay;
  lc.batch_size = tc.batch_size;
  lc.audit_every_step = false;
  Rng shuffle = make_stream(seed, "shuffle", 0);
  const auto t0 = std::chrono::steady_clock::now();
  auto log = train_loop(st.model, data, ts, lc, shuffle);
  if (report) {
    report->timestep = 0;
    report->strategy = "BASE";
    report->epochs = lc.epochs;
    report->learning_rate = lc.lr;
    report->steps = log.steps;
    report->epoch_loss = log.epoch_loss;
    report->trainable = trainable_records(st.model, ts, 0);
    report->encoder_digest_after = hex64(st.model.encoder.weights().digest());
    report->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return st;
}

/// Selection-space embeddings with no prompts: the final [CLS] for two-pass
/// selection, or the mean of the hidden state entering the first prompting
/// layer for single-pass selection.
template <class T>
Tensor<T> selection_space_embeddings(const Encoder<T>& enc, std::span<const std::vector<int>> seqs) {
  PackedBatch batch;
  for (const auto& s : seqs) batch.add(s);
  const auto& cfg = enc.config();
  if (cfg.selection == SelectionMode::kTwoPassCls) return enc.forward_cls(batch);
  Tensor<T> x = enc.embed(batch);
  for (int l = 0; l < cfg.first_prompt_layer() - 1; ++l) x = enc.run_layer(std::size_t(l), x, batch, std::span<const Prefix<T>>{}, nullptr);
  return mean_per_sequence(x, batch);
}

/// Per-document mean of query embeddings, rows ordered like `doc_ids`.
template <class T>
Tensor<T> per_document_means(const Tensor<T>& emb, const std::vector<int>& docid_of_row,
                             std::size_t first_docid, std::size_t n_docs) {
  Tensor<T> out({n_docs, emb.cols()});
  std::vector<std::size_t> count(n_docs, 0);
  for (std::size_t r = 0; r < emb.rows(); ++r) {
    const std::size_t d = std::size_t(docid_of_row[r]) - first_docid;
    PROMPTDSI_REQUIRE(d < n_docs, IndexError, "query docid outside the segment");
    ++count[d];
    auto src = emb.row(r);
    auto dst = out.row(d);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  for (std::size_t d = 0; d < n_docs; ++d) {
    PROMPTDSI_REQUIRE(count[d] > 0, DataError, "document without training queries");
    for (auto& v : out.row(d)) v /= T(count[d]);
  }
  return out;
}

template <class T>
Tensor<T> embed_in_chunks(const std::vector<Example>& data, std::size_t chunk,
                          const std::function<Tensor<T>(std::span<const std::vector<int>>)>& f,
                          std::size_t dim) {
  Tensor<T> out({data.size(), dim});
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    const std::size_t e = std::min(data.size(), b + chunk);
    std::vector<std::vector<int>> seqs;
    for (std::size_t i = b; i < e; ++i) seqs.push_back(data[i].tokens);
    Tensor<T> h = f(seqs);
    std::copy_n(h.data(), h.size(), out.data() + b * dim);
  }
  return out;
}

struct PromptSetup {
  EncoderConfig encoder;  // carries prompting layers and selection mode
  PoolConfig pool;
};

/// Strategy-specific preparation that may only look at D_0 (t = 0): topic
/// mining for TOPIC, the centroid cache for CACHED_CENTROID, and the pool
/// shell for prompt strategies.
template <class T>
void prepare_strategy(IndexState<T>& st, CorpusStore& store, StrategyTag strategy,
                      const PromptSetup& ps, const TrainConfig& tc, std::uint64_t seed) {
  store.begin_timestep(0, false);
  if (is_prompt_strategy(strategy)) {
    EncoderConfig cfg = ps.encoder;
    cfg.selection = is_naive(strategy) ? SelectionMode::kTwoPassCls : SelectionMode::kSinglePassAvg;
    cfg.validate();
    PROMPTDSI_REQUIRE(cfg.num_layers == st.model.config().num_layers && cfg.dim == st.model.config().dim,
                      ConfigError, "prompt setup disagrees with the base encoder");
    st.model.encoder = Encoder<T>(cfg, st.model.encoder.weights());
    const auto ps_strat = pool_strategy(strategy);
    const std::size_t m = std::size_t(ps_strat == PoolStrategy::kCODA ? ps.pool.coda_prompt_length
                                                                      : ps.pool.prompt_length);
    const std::size_t top_n = ps_strat == PoolStrategy::kCODA ? 1 : std::size_t(ps.pool.top_n);
    st.model.pool = PromptPool<T>(ps_strat, std::size_t(cfg.dim), cfg.prompt_layers.size(), m, top_n);
    if (ps_strat == PoolStrategy::kTopic) {
      const auto data = make_examples(store.training_queries(0), st.registry);
      const auto& enc = st.model.encoder;
      Tensor<T> emb = embed_in_chunks<T>(
          data, std::size_t(tc.eval_batch),
          [&](std::span<const std::vector<int>> s) { return selection_space_embeddings(enc, s); },
          std::size_t(cfg.dim));
      std::vector<int> docids;
      for (const auto& e : data) docids.push_back(e.docid);
      const auto seg = st.registry.segments().at(0);
      Tensor<T> docs = per_document_means(emb, docids, seg.begin, seg.size());
      auto tm = mine_topics(docs, std::size_t(tc.num_topics), seed);
      // Topics are labeled from the documents' training-query tokens.
      std::vector<std::vector<int>> bodies(seg.size());
      for (const auto& e : data)
        bodies[std::size_t(e.docid) - seg.begin].insert(bodies[std::size_t(e.docid) - seg.begin].end(),
                                                        e.tokens.begin() + 1, e.tokens.end());
      tm.top_terms = ctfidf_terms(tm.assignments, bodies, tm.num_topics(), 10);
      st.topics = std::move(tm);
    }
  } else if (strategy == StrategyTag::kCachedCentroid) {
    const auto data = make_examples(store.cache_queries(0), st.registry);
    const auto& enc = st.model.encoder;
    Tensor<T> emb = embed_in_chunks<T>(
        data, std::size_t(tc.eval_batch),
        [&](std::span<const std::vector<int>> s) { return enc.forward_cls(pack<T>(s)); },
        std::size_t(st.model.config().dim));
    std::vector<int> docids;
    for (const auto& e : data) docids.push_back(e.docid);
    const auto seg = st.registry.segments().at(0);
    st.cache.emplace(std::size_t(st.model.config().dim));
    st.cache->append(per_document_means(emb, docids, seg.begin, seg.size()));
  }
}

/// One continual-indexing step: register and expand for D_t, apply the
/// strategy's freeze plan, train, and report.
template <class T>
TrainReport continual_index_step(IndexState<T>& st, CorpusStore& store, int t,
                                 StrategyTag strategy, const PromptSetup& ps,
                                 const TrainConfig& tc, std::uint64_t seed, int final_timestep) {
  PROMPTDSI_REQUIRE(t >= 1, ContractError, "continual steps start at t=1");
  store.begin_timestep(t, is_rehearsal_free(strategy));
  const auto start = std::chrono::steady_clock::now();
  TrainReport rep;
  rep.timestep = t;
  rep.strategy = to_string(strategy);
  rep.encoder_digest_before = hex64(st.model.encoder.weights().digest());

  const auto ids = store.doc_ids(t);
  st.registry.add_segment(t, ids);
  Rng cls_rng = make_stream(seed, "init.classifier", std::uint64_t(t));
  expand_classifier(st.model.classifier, ids.size(), cls_rng);
  const std::size_t n_seg = st.model.classifier.num_segments();

  TrainableSet ts;
  ts.segments.assign(n_seg, false);
  LoopConfig lc;
  lc.weight_decay = tc.weight_decay;
  lc.batch_size = tc.batch_size;
  lc.audit_every_step = tc.audit_every_step;
  std::vector<Example> data;
  std::vector<Example> replay;

  switch (strategy) {
    case StrategyTag::kSeqFt:
    case StrategyTag::kReplayFt:
      ts.encoder = true;
      ts.segments.assign(n_seg, true);
      st.model.classifier.unfreeze_all();
      lc.epochs = tc.epochs;
      lc.lr = tc.lr;
      data = make_examples(store.training_queries(t), st.registry);
      if (strategy == StrategyTag::kReplayFt) {
        for (int i = 0; i < t; ++i) {
          auto r = make_examples(store.replay_queries(i), st.registry);
          replay.insert(replay.end(), r.begin(), r.end());
        }
        lc.replay_every = tc.replay_every;
      }
      break;
    case StrategyTag::kFrozenCls:
      st.model.classifier.freeze_all();
      st.model.classifier.set_frozen(n_seg - 1, false);
      ts.segments.back() = true;
      lc.epochs = tc.epochs;
      lc.lr = tc.head_lr;
      data = make_examples(store.training_queries(t), st.registry);
      break;
    case StrategyTag::kCachedCentroid: {
      PROMPTDSI_REQUIRE(st.cache.has_value(), ContractError, "centroid cache not prepared");
      st.model.classifier.freeze_all();
      st.model.classifier.set_frozen(n_seg - 1, false);
      ts.segments.back() = true;
      data = make_examples(store.cache_queries(t), st.registry);
      const auto& enc = st.model.encoder;
      Tensor<T> emb = embed_in_chunks<T>(
          data, std::size_t(tc.eval_batch),
          [&](std::span<const std::vector<int>> s) { return enc.forward_cls(pack<T>(s)); },
          std::size_t(st.model.config().dim));
      std::vector<int> docids;
      for (const auto& e : data) docids.push_back(e.docid);
      const auto seg = st.registry.segments().back();
      Tensor<T> means = per_document_means(emb, docids, seg.begin, seg.size());
      st.cache->append(means);
      Tensor<T>& cols = st.model.classifier.segment(n_seg - 1);
      for (std::size_t d = 0; d < seg.size(); ++d) {
        auto z = st.cache->row(seg.begin + d);
        auto dst = cols.row(d);
        std::copy(z.begin(), z.end(), dst.begin());
        normalize_inplace(dst);
      }
      lc.epochs = tc.refine_epochs;
      lc.lr = tc.head_lr;
      break;
    }
    case StrategyTag::kMulti:
    case StrategyTag::kJoint:
      ts.encoder = true;
      ts.segments.assign(n_seg, true);
      st.model.classifier.unfreeze_all();
      lc.lr = tc.lr;
      lc.epochs = t == final_timestep ? tc.epochs : 0;
      if (t == final_timestep)
        for (int i = strategy == StrategyTag::kJoint ? 0 : 1; i <= t; ++i) {
          auto d = make_examples(store.training_queries(i), st.registry);
          data.insert(data.end(), d.begin(), d.end());
        }
      break;
    default: {
      PROMPTDSI_REQUIRE(st.model.pool.has_value(), ContractError, "prompt pool not prepared");
      st.model.classifier.freeze_all();
      st.model.classifier.set_frozen(n_seg - 1, false);
      ts.segments.back() = true;
      Rng pool_rng = make_stream(seed, "init.pool", std::uint64_t(t));
      std::optional<Tensor<T>> keys;
      if (st.topics) keys = topic_keys(*st.topics);
      auto plan = allocate_for_timestep(*st.model.pool, t, ps.pool, keys ? &*keys : nullptr, pool_rng);
      ts.pool = true;
      if (st.model.pool->strategy() == PoolStrategy::kSPP) ts.selection_candidates = plan.trainable;
      lc.epochs = tc.prompt_epochs();
      lc.lr = tc.head_lr;
      lc.match_weight = ps.pool.match_weight;
      data = make_examples(store.training_queries(t), st.registry);
      break;
    }
  }

  rep.trainable = trainable_records(st.model, ts, t);
  rep.epochs = lc.epochs;
  rep.learning_rate = lc.lr;
  std::vector<const QueryRecord*> probe = store.test_queries(t);
  rep.pre_hits10 = evaluate_queries(st.model, st.registry, probe, t, tc).hits10;

  Rng shuffle = make_stream(seed, "shuffle", std::uint64_t(t));
  Rng replay_rng = make_stream(seed, "replay", std::uint64_t(t));
  const auto inv0 = st.model.encoder.layer_invocations();
  auto log = train_loop(st.model, data, ts, lc, shuffle, replay.empty() ? nullptr : &replay, &replay_rng);
  rep.layer_invocations = st.model.encoder.layer_invocations() - inv0;
  rep.steps = log.steps;
  rep.replay_steps = log.replay_steps;
  rep.epoch_loss = log.epoch_loss;
  rep.audits = log.audits;
  {
    FreezeAudit<T> a;
    a.snapshot(st.model, ts);
    rep.frozen_tensors = a.tracked();
  }
  rep.post_hits10 = evaluate_queries(st.model, st.registry, probe, t, tc).hits10;
  rep.encoder_digest_after = hex64(st.model.encoder.weights().digest());
  st.timestep = t;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

template <class T>
struct ScheduleResult {
  PerfMatrix hits1{"hits@1"}, hits10{"hits@10"}, mrr10{"mrr@10"};
  std::vector<TrainReport> reports;                    // t = 1..T
  std::vector<SelectionLogEntry<T>> selection_log;     // evaluation at t = T
  std::vector<std::uint64_t> encoder_digests;          // after each t
  std::uint64_t continual_layer_invocations = 0;       // t >= 1, training and evaluation
  double continual_seconds = 0;
  std::size_t backward_reads = 0;
  std::size_t pool_size = 0;  // at t = T
  std::uint64_t params = 0;   // distinct trainable scalars over t = 1..T
};

template <class T>
using TimestepHook = std::function<void(int t, const IndexState<T>&, const std::vector<CorpusMetrics>&)>;

/// t = 0 evaluation of the given base state, then T continual steps with
/// one PerfMatrix row per timestep.
template <class T>
ScheduleResult<T> run_schedule(IndexState<T> st, CorpusStore& store, StrategyTag strategy,
                               const PromptSetup& ps, const TrainConfig& tc, std::uint64_t seed,
                               const TimestepHook<T>& hook = {}) {
  tc.validate();
  const int T_final = int(store.num_corpora()) - 1;
  PROMPTDSI_REQUIRE(T_final >= 1, ConfigError, "a schedule needs D_0 and at least one increment");
  ScheduleResult<T> res;
  auto push_row = [&](int t, const std::vector<CorpusMetrics>& row) {
    std::vector<double> h1, h10, mrr;
    for (const auto& m : row) {
      h1.push_back(m.hits1);
      h10.push_back(m.hits10);
      mrr.push_back(m.mrr10);
    }
    res.hits1.add_row(h1);
    res.hits10.add_row(h10);
    res.mrr10.add_row(mrr);
    res.encoder_digests.push_back(st.model.encoder.weights().digest());
    if (hook) hook(t, st, row);
  };

  store.begin_timestep(0, false);
  push_row(0, evaluate_row(st.model, st.registry, store, 0, tc));
  prepare_strategy(st, store, strategy, ps, tc, seed);

  const auto inv0 = st.model.encoder.layer_invocations();
  const auto start = std::chrono::steady_clock::now();
  for (int t = 1; t <= T_final; ++t) {
    res.reports.push_back(continual_index_step(st, store, t, strategy, ps, tc, seed, T_final));
    auto row = evaluate_row(st.model, st.registry, store, t, tc,
                            t == T_final ? &res.selection_log : nullptr);
    push_row(t, row);
  }
  res.continual_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.continual_layer_invocations = st.model.encoder.layer_invocations() - inv0;
  res.backward_reads = store.backward_reads();
  res.pool_size = st.model.pool ? st.model.pool->size() : 0;
  std::vector<TrainableRecord> records;
  for (const auto& r : res.reports) records.insert(records.end(), r.trainable.begin(), r.trainable.end());
  res.params = params_accounting(records, 1, T_final);
  return res;
}

}  // namespace promptdsi
