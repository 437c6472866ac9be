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

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "promptdsi/continual.hpp"

namespace promptdsi {

/// Everything a run needs. Serialized next to every artifact; its hash
/// names the run directory.
struct RunConfig {
  std::string data_path;  // empty: generate from `synthetic`
  SyntheticSpec synthetic;
  EncoderConfig encoder;
  StrategyTag strategy = StrategyTag::kPromptL2P;
  TrainConfig train;
  PoolConfig pool;
  std::uint64_t seed = 1;
  std::string out_dir = "runs";

  PromptSetup prompt_setup() const { return {encoder, pool}; }

  void validate() const {
    encoder.validate();
    train.validate();
    if (data_path.empty()) {
      synthetic.validate();
      PROMPTDSI_REQUIRE(encoder.vocab_size >= synthetic.vocab_size, ConfigError,
                        "encoder vocabulary smaller than the synthetic vocabulary");
      PROMPTDSI_REQUIRE(encoder.max_seq_len >= synthetic.max_query_length() + 1, ConfigError,
                        "max_seq_len must fit the longest query plus [CLS]");
    }
    PROMPTDSI_REQUIRE(pool.pool_size >= 1 && pool.top_n >= 1 && pool.top_n <= pool.pool_size,
                      ConfigError, "pool needs 1 <= top_n <= pool_size");
    PROMPTDSI_REQUIRE(pool.prompt_length >= 0 && pool.prompt_length % 2 == 0 &&
                          pool.coda_prompt_length >= 0 && pool.coda_prompt_length % 2 == 0,
                      ConfigError, "prompt lengths must be even and non-negative");
    PROMPTDSI_REQUIRE(pool.coda_prompts_per_task >= 1, ConfigError, "CODA needs >= 1 prompt per task");
    PROMPTDSI_REQUIRE(pool.match_weight >= 0, ConfigError, "match_weight must be >= 0");
    if (is_prompt_strategy(strategy))
      PROMPTDSI_REQUIRE(!encoder.prompt_layers.empty(), ConfigError,
                        "prompt strategies need at least one prompting layer");
  }
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError("unknown key '" + where + "." + k + "'");
}

template <class V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError("bad type for '" + where + "." + key + "'");
  }
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json data;
  if (!c.data_path.empty()) {
    data["path"] = c.data_path;
  } else {
    const auto& s = c.synthetic;
    data["synthetic"] = {{"vocab_size", s.vocab_size},
                         {"num_topics", s.num_topics},
                         {"terms_per_topic", s.terms_per_topic},
                         {"common_terms", s.common_terms},
                         {"docs_initial", s.docs_initial},
                         {"docs_per_increment", s.docs_per_increment},
                         {"increments", s.increments},
                         {"entities_per_doc", s.entities_per_doc},
                         {"body_length", s.body_length},
                         {"natural_queries_per_doc", s.natural_queries_per_doc},
                         {"pseudo_queries_per_doc", s.pseudo_queries_per_doc},
                         {"train_fraction", s.train_fraction},
                         {"val_fraction", s.val_fraction},
                         {"common_rate", s.common_rate},
                         {"min_query_terms", s.min_query_terms},
                         {"max_query_terms", s.max_query_terms},
                         {"seed", s.seed}};
  }
  j["data"] = data;
  const auto& e = c.encoder;
  j["encoder"] = {{"num_layers", e.num_layers},   {"dim", e.dim},
                  {"num_heads", e.num_heads},     {"ff_dim", e.ff_dim},
                  {"max_seq_len", e.max_seq_len}, {"vocab_size", e.vocab_size},
                  {"prompt_layers", e.prompt_layers}};
  j["strategy"] = to_string(c.strategy);
  const auto& t = c.train;
  j["train"] = {{"base_epochs", t.base_epochs},
                {"base_lr", t.base_lr},
                {"epochs", t.epochs},
                {"lr", t.lr},
                {"head_lr", t.head_lr},
                {"prompt_epoch_factor", t.prompt_epoch_factor},
                {"refine_epochs", t.refine_epochs},
                {"batch_size", t.batch_size},
                {"replay_every", t.replay_every},
                {"weight_decay", t.weight_decay},
                {"eval_batch", t.eval_batch},
                {"eval_k", t.eval_k},
                {"num_topics", t.num_topics},
                {"audit_every_step", t.audit_every_step}};
  const auto& p = c.pool;
  j["pool"] = {{"pool_size", p.pool_size},
               {"prompt_length", p.prompt_length},
               {"top_n", p.top_n},
               {"coda_prompts_per_task", p.coda_prompts_per_task},
               {"coda_prompt_length", p.coda_prompt_length},
               {"match_weight", p.match_weight},
               {"topic_freeze_previous", p.topic_freeze_previous}};
  j["seed"] = c.seed;
  j["out"] = c.out_dir;
  return j;
}

/// Missing keys keep their defaults; unknown keys and wrong types are
/// configuration errors.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::read;
  RunConfig c;
  detail::reject_unknown(j, "config", {"data", "encoder", "strategy", "train", "pool", "seed", "out"});
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown(d, "data", {"path", "synthetic"});
    if (d.contains("path") && d.contains("synthetic"))
      throw ConfigError("data takes either 'path' or 'synthetic', not both");
    read(d, "path", c.data_path, "data");
    if (d.contains("synthetic")) {
      const auto& s = d["synthetic"];
      detail::reject_unknown(s, "data.synthetic",
                             {"vocab_size", "num_topics", "terms_per_topic", "common_terms",
                              "docs_initial", "docs_per_increment", "increments",
                              "entities_per_doc", "body_length", "natural_queries_per_doc",
                              "pseudo_queries_per_doc", "train_fraction", "val_fraction",
                              "common_rate", "min_query_terms", "max_query_terms", "seed"});
      auto& o = c.synthetic;
      const std::string w = "data.synthetic";
      read(s, "vocab_size", o.vocab_size, w);
      read(s, "num_topics", o.num_topics, w);
      read(s, "terms_per_topic", o.terms_per_topic, w);
      read(s, "common_terms", o.common_terms, w);
      read(s, "docs_initial", o.docs_initial, w);
      read(s, "docs_per_increment", o.docs_per_increment, w);
      read(s, "increments", o.increments, w);
      read(s, "entities_per_doc", o.entities_per_doc, w);
      read(s, "body_length", o.body_length, w);
      read(s, "natural_queries_per_doc", o.natural_queries_per_doc, w);
      read(s, "pseudo_queries_per_doc", o.pseudo_queries_per_doc, w);
      read(s, "train_fraction", o.train_fraction, w);
      read(s, "val_fraction", o.val_fraction, w);
      read(s, "common_rate", o.common_rate, w);
      read(s, "min_query_terms", o.min_query_terms, w);
      read(s, "max_query_terms", o.max_query_terms, w);
      read(s, "seed", o.seed, w);
    }
  }
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    detail::reject_unknown(e, "encoder", {"num_layers", "dim", "num_heads", "ff_dim", "max_seq_len",
                                          "vocab_size", "prompt_layers"});
    read(e, "num_layers", c.encoder.num_layers, "encoder");
    read(e, "dim", c.encoder.dim, "encoder");
    read(e, "num_heads", c.encoder.num_heads, "encoder");
    read(e, "ff_dim", c.encoder.ff_dim, "encoder");
    read(e, "max_seq_len", c.encoder.max_seq_len, "encoder");
    read(e, "vocab_size", c.encoder.vocab_size, "encoder");
    read(e, "prompt_layers", c.encoder.prompt_layers, "encoder");
  }
  if (j.contains("strategy")) {
    if (!j["strategy"].is_string()) throw ConfigError("strategy must be a string");
    c.strategy = strategy_from_string(j["strategy"].get<std::string>());
  }
  c.encoder.selection = is_naive(c.strategy) ? SelectionMode::kTwoPassCls : SelectionMode::kSinglePassAvg;
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::reject_unknown(t, "train", {"base_epochs", "base_lr", "epochs", "lr", "head_lr",
                                        "prompt_epoch_factor", "refine_epochs", "batch_size",
                                        "replay_every", "weight_decay", "eval_batch", "eval_k",
                                        "num_topics", "audit_every_step"});
    auto& o = c.train;
    read(t, "base_epochs", o.base_epochs, "train");
    read(t, "base_lr", o.base_lr, "train");
    read(t, "epochs", o.epochs, "train");
    read(t, "lr", o.lr, "train");
    read(t, "head_lr", o.head_lr, "train");
    read(t, "prompt_epoch_factor", o.prompt_epoch_factor, "train");
    read(t, "refine_epochs", o.refine_epochs, "train");
    read(t, "batch_size", o.batch_size, "train");
    read(t, "replay_every", o.replay_every, "train");
    read(t, "weight_decay", o.weight_decay, "train");
    read(t, "eval_batch", o.eval_batch, "train");
    read(t, "eval_k", o.eval_k, "train");
    read(t, "num_topics", o.num_topics, "train");
    read(t, "audit_every_step", o.audit_every_step, "train");
  }
  if (j.contains("pool")) {
    const auto& p = j["pool"];
    detail::reject_unknown(p, "pool", {"pool_size", "prompt_length", "top_n", "coda_prompts_per_task",
                                       "coda_prompt_length", "match_weight", "topic_freeze_previous"});
    auto& o = c.pool;
    read(p, "pool_size", o.pool_size, "pool");
    read(p, "prompt_length", o.prompt_length, "pool");
    read(p, "top_n", o.top_n, "pool");
    read(p, "coda_prompts_per_task", o.coda_prompts_per_task, "pool");
    read(p, "coda_prompt_length", o.coda_prompt_length, "pool");
    read(p, "match_weight", o.match_weight, "pool");
    read(p, "topic_freeze_previous", o.topic_freeze_previous, "pool");
  }
  read(j, "seed", c.seed, "config");
  read(j, "out", c.out_dir, "config");
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return run_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Hash of the canonical config with the output directory excluded.
inline std::string config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("out");
  return hex64(fnv1a(j.dump()));
}

inline CorpusTimeline load_timeline(const RunConfig& c) {
  return c.data_path.empty() ? generate_corpora(c.synthetic) : load_jsonl(c.data_path);
}

}  // namespace promptdsi
