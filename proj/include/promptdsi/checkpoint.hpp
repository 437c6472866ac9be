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

#include <bit>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "promptdsi/continual.hpp"

namespace promptdsi {

static_assert(std::endian::native == std::endian::little,
              "checkpoint tensors are stored as raw little-endian floats");

namespace detail {

inline void write_raw(const std::filesystem::path& p, const Tensor<float>& t) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
}

inline Tensor<float> read_raw(const std::filesystem::path& p, const Shape& shape) {
  Tensor<float> t(shape);
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("missing tensor file " + p.string());
  if (std::size_t(in.tellg()) != t.size() * sizeof(float))
    throw DataError("tensor file " + p.string() + " has the wrong size");
  in.seekg(0);
  in.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
  return t;
}

}  // namespace detail

/// Directory with manifest.json and one raw float32 file per tensor.
inline void save_checkpoint(const IndexState<float>& st, const std::filesystem::path& dir,
                            const std::string& config_hash, const std::string& strategy) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json m;
  m["format"] = "promptdsi-checkpoint-1";
  m["config_hash"] = config_hash;
  m["strategy"] = strategy;
  m["timestep"] = st.timestep;
  const auto& c = st.model.config();
  m["encoder"] = {{"num_layers", c.num_layers},   {"dim", c.dim},
                  {"num_heads", c.num_heads},     {"ff_dim", c.ff_dim},
                  {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size},
                  {"prompt_layers", c.prompt_layers}, {"selection", to_string(c.selection)}};
  auto& reg = m["registry"] = nlohmann::ordered_json::array();
  for (const auto& seg : st.registry.segments()) {
    std::vector<std::string> ids(st.registry.external_ids().begin() + std::ptrdiff_t(seg.begin),
                                 st.registry.external_ids().begin() + std::ptrdiff_t(seg.end));
    reg.push_back({{"timestep", seg.timestep}, {"doc_ids", ids}});
  }
  std::vector<bool> frozen;
  for (std::size_t s = 0; s < st.model.classifier.num_segments(); ++s)
    frozen.push_back(st.model.classifier.frozen(s));
  m["classifier_frozen"] = frozen;
  auto& tensors = m["tensors"] = nlohmann::ordered_json::array();
  auto put = [&](const std::string& name, const Tensor<float>& t) {
    const std::string file = name + ".f32";
    detail::write_raw(dir / file, t);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"digest", hex64(digest(t))}, {"file", file}});
  };
  st.model.encoder.weights().for_each(
      [&](const std::string& name, const Tensor<float>& t) { put("encoder." + name, t); });
  for (std::size_t s = 0; s < st.model.classifier.num_segments(); ++s)
    put("classifier.segment" + std::to_string(s), st.model.classifier.segment(s));
  if (st.model.pool) {
    const auto& p = *st.model.pool;
    nlohmann::ordered_json pj;
    pj["strategy"] = to_string(p.strategy());
    pj["prompt_length"] = p.prompt_length();
    pj["top_n"] = p.top_n();
    auto& entries = pj["entries"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto& e = p.entry(i);
      entries.push_back({{"frozen", e.frozen}, {"key_frozen", e.key_frozen}, {"provenance", e.provenance},
                         {"has_attention", !e.attention.empty()}});
      const std::string base = "pool." + std::to_string(i) + ".";
      put(base + "prompt", e.prompt);
      put(base + "key", e.key);
      if (!e.attention.empty()) put(base + "attention", e.attention);
    }
    m["pool"] = pj;
  }
  if (st.topics) {
    std::ofstream tj(dir / "topics.json");
    tj << to_json(*st.topics).dump(1) << "\n";
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << m.dump(1) << "\n";
}

/// Reads a checkpoint and verifies every tensor digest.
inline IndexState<float> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no manifest.json in " + dir.string());
  IndexState<float> st;
  try {
    const auto m = nlohmann::json::parse(in);
    if (m.at("format") != "promptdsi-checkpoint-1") throw DataError("unknown checkpoint format");
    std::map<std::string, Tensor<float>> tensors;
    for (const auto& t : m.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      auto tensor = detail::read_raw(dir / t.at("file").get<std::string>(), t.at("shape").get<Shape>());
      if (hex64(digest(tensor)) != t.at("digest").get<std::string>())
        throw DataError("digest mismatch for tensor " + name);
      tensors.emplace(name, std::move(tensor));
    }
    auto take = [&](const std::string& name) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw DataError("checkpoint lacks tensor " + name);
      return std::move(it->second);
    };
    const auto& e = m.at("encoder");
    EncoderConfig c;
    c.num_layers = e.at("num_layers");
    c.dim = e.at("dim");
    c.num_heads = e.at("num_heads");
    c.ff_dim = e.at("ff_dim");
    c.max_seq_len = e.at("max_seq_len");
    c.vocab_size = e.at("vocab_size");
    c.prompt_layers = e.at("prompt_layers").get<std::vector<int>>();
    c.selection = selection_mode_from_string(e.at("selection").get<std::string>());
    c.validate();
    auto w = EncoderWeights<float>::zeros(c);
    w.for_each([&](const std::string& name, Tensor<float>& t) {
      auto src = take("encoder." + name);
      if (src.shape() != t.shape()) throw DataError("shape mismatch for encoder." + name);
      t = std::move(src);
    });
    st.model.encoder = Encoder<float>(c, std::move(w));
    st.model.classifier = Classifier<float>(std::size_t(c.dim));
    const auto frozen = m.at("classifier_frozen").get<std::vector<bool>>();
    std::size_t s = 0;
    for (const auto& seg : m.at("registry")) {
      const auto ids = seg.at("doc_ids").get<std::vector<std::string>>();
      st.registry.add_segment(seg.at("timestep").get<int>(), ids);
      auto rows = take("classifier.segment" + std::to_string(s));
      if (rows.rows() != ids.size()) throw DataError("classifier segment size differs from registry");
      st.model.classifier.append_segment(std::move(rows));
      st.model.classifier.set_frozen(s, frozen.at(s));
      ++s;
    }
    if (m.contains("pool")) {
      const auto& pj = m["pool"];
      const auto name = pj.at("strategy").get<std::string>();
      PoolStrategy ps = PoolStrategy::kL2P;
      for (auto cand : {PoolStrategy::kL2P, PoolStrategy::kSPP, PoolStrategy::kCODA, PoolStrategy::kTopic})
        if (to_string(cand) == name) ps = cand;
      PromptPool<float> pool(ps, std::size_t(c.dim), c.prompt_layers.size(),
                             pj.at("prompt_length").get<std::size_t>(), pj.at("top_n").get<std::size_t>());
      std::size_t i = 0;
      for (const auto& ej : pj.at("entries")) {
        PromptEntry<float> entry;
        const std::string base = "pool." + std::to_string(i) + ".";
        entry.prompt = take(base + "prompt");
        entry.key = take(base + "key");
        if (ej.at("has_attention").get<bool>()) entry.attention = take(base + "attention");
        entry.frozen = ej.at("frozen");
        entry.key_frozen = ej.at("key_frozen");
        entry.provenance = ej.at("provenance");
        pool.entries().push_back(std::move(entry));
        ++i;
      }
      pool.mark_modified();
      st.model.pool = std::move(pool);
    }
    st.timestep = m.at("timestep");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (std::filesystem::exists(dir / "topics.json")) {
    std::ifstream tj(dir / "topics.json");
    st.topics = topic_model_from_json<float>(nlohmann::json::parse(tj));
  }
  return st;
}

}  // namespace promptdsi
