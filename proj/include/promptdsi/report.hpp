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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptdsi/continual.hpp"

namespace promptdsi {

/// Round-trippable decimal form.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string perf_matrix_csv(const std::vector<const PerfMatrix*>& mats) {
  std::string out = "t,i,metric,value\n";
  for (const auto* P : mats)
    for (std::size_t t = 0; t < P->rows(); ++t)
      for (std::size_t i = 0; i <= t; ++i)
        out += std::to_string(t) + "," + std::to_string(i) + "," + P->metric() + "," +
               fmt_double(P->at(t, i)) + "\n";
  return out;
}

/// Inverse of perf_matrix_csv.
inline std::vector<PerfMatrix> parse_perf_matrix_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "t,i,metric,value") throw DataError("perf matrix CSV has an unexpected header");
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::vector<double>>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string ts, is, metric, vs;
    if (!std::getline(ls, ts, ',') || !std::getline(ls, is, ',') || !std::getline(ls, metric, ',') ||
        !std::getline(ls, vs))
      throw DataError("perf matrix CSV line " + std::to_string(line_no) + " is malformed");
    const std::size_t t = std::stoul(ts), i = std::stoul(is);
    if (!rows.count(metric)) order.push_back(metric);
    auto& r = rows[metric];
    if (r.size() <= t) r.resize(t + 1);
    if (r[t].size() != i) throw DataError("perf matrix CSV is not in (t, i) order");
    r[t].push_back(std::stod(vs));
  }
  std::vector<PerfMatrix> out;
  for (const auto& name : order) {
    PerfMatrix P(name);
    for (auto& row : rows[name]) P.add_row(row);
    out.push_back(std::move(P));
  }
  return out;
}

/// A_t, F_t, LA_t and D_0 forgetting per timestep.
inline std::string trace_csv(const std::vector<const PerfMatrix*>& mats) {
  std::string out = "t,metric,A,F,LA,forgetting_D0\n";
  for (const auto* P : mats)
    for (std::size_t t = 0; t < P->rows(); ++t) {
      const auto m = cl_metrics(*P, t);
      auto opt = [](const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); };
      out += std::to_string(t) + "," + P->metric() + "," + opt(m.average) + "," + opt(m.forgetting) +
             "," + opt(m.learning_average) + "," + fmt_double(m.forgetting_d0) + "\n";
    }
  return out;
}

template <class T>
std::string selection_log_csv(const std::vector<SelectionLogEntry<T>>& log) {
  std::string out = "corpus_id,query_id,prompt_ids,distances\n";
  for (const auto& e : log) {
    std::string ids, ds;
    for (std::size_t j = 0; j < e.prompt_ids.size(); ++j) {
      ids += (j ? ";" : "") + std::to_string(e.prompt_ids[j]);
      ds += (j ? ";" : "") + fmt_double(double(e.distances[j]));
    }
    out += std::to_string(e.corpus) + "," + e.query_id + "," + ids + "," + ds + "\n";
  }
  return out;
}

inline std::string utilization_csv(const UtilizationStats& u) {
  std::string out = "corpus_id,prompt_id,count,frequency\n";
  for (std::size_t r = 0; r < u.corpora.size(); ++r)
    for (std::size_t p = 0; p < u.pool_size; ++p)
      out += std::to_string(u.corpora[r]) + "," + std::to_string(p) + "," +
             std::to_string(u.counts[r][p]) + "," + fmt_double(u.frequency[r][p]) + "\n";
  for (std::size_t p = 0; p < u.pool_size; ++p)
    out += "all," + std::to_string(p) + ",," + fmt_double(u.overall_frequency[p]) + "\n";
  return out;
}

inline nlohmann::ordered_json to_json(const TrainReport& r) {
  nlohmann::ordered_json j;
  j["timestep"] = r.timestep;
  j["strategy"] = r.strategy;
  j["epochs"] = r.epochs;
  j["learning_rate"] = r.learning_rate;
  j["steps"] = r.steps;
  j["replay_steps"] = r.replay_steps;
  j["epoch_loss"] = r.epoch_loss;
  j["pre_hits10"] = r.pre_hits10;
  j["post_hits10"] = r.post_hits10;
  j["encoder_digest_before"] = r.encoder_digest_before;
  j["encoder_digest_after"] = r.encoder_digest_after;
  j["frozen_tensors"] = r.frozen_tensors;
  j["audits"] = r.audits;
  j["layer_invocations"] = r.layer_invocations;
  std::uint64_t params = 0;
  for (const auto& t : r.trainable) params += t.size;
  j["trainable_params"] = params;
  j["seconds"] = r.seconds;
  return j;
}

/// Table-2 shaped summary: the D_0 block at t = T, the A_T block, and the
/// trainable parameter count of the continual phase.
inline nlohmann::ordered_json summary_json(const std::string& strategy,
                                           const std::vector<const PerfMatrix*>& mats,
                                           std::uint64_t params) {
  nlohmann::ordered_json j;
  j["strategy"] = strategy;
  nlohmann::ordered_json d0, at, ft, lat, fd0;
  std::size_t T = 0;
  for (const auto* P : mats) {
    T = P->rows() - 1;
    const auto m = cl_metrics(*P, T);
    d0[P->metric()] = P->at(T, 0);
    fd0[P->metric()] = m.forgetting_d0;
    at[P->metric()] = m.average ? nlohmann::ordered_json(*m.average) : nlohmann::ordered_json();
    ft[P->metric()] = m.forgetting ? nlohmann::ordered_json(*m.forgetting) : nlohmann::ordered_json();
    lat[P->metric()] = m.learning_average ? nlohmann::ordered_json(*m.learning_average) : nlohmann::ordered_json();
  }
  j["final_timestep"] = T;
  j["D0"] = d0;
  j["forgetting_D0"] = fd0;
  j["A"] = at;
  j["F"] = ft;
  j["LA"] = lat;
  j["params"] = params;
  return j;
}

inline std::string summary_csv(const nlohmann::ordered_json& s) {
  std::string out = "strategy,block,metric,value\n";
  for (const char* block : {"D0", "forgetting_D0", "A", "F", "LA"})
    for (const auto& [metric, v] : s.at(block).items())
      out += s.at("strategy").get<std::string>() + "," + block + "," + metric + "," +
             (v.is_null() ? std::string() : fmt_double(v.get<double>())) + "\n";
  out += s.at("strategy").get<std::string>() + ",params,trainable," +
         std::to_string(s.at("params").get<std::uint64_t>()) + "\n";
  return out;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace promptdsi
