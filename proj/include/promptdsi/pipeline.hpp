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

#include <filesystem>
#include <optional>

#include "promptdsi/checkpoint.hpp"
#include "promptdsi/config.hpp"
#include "promptdsi/report.hpp"

namespace promptdsi {

struct RunOutput {
  std::filesystem::path dir;
  ScheduleResult<float> result;
  nlohmann::ordered_json summary;
};

inline std::filesystem::path run_directory(const RunConfig& cfg) {
  return std::filesystem::path(cfg.out_dir) / config_hash(cfg);
}

/// Base model Theta_0 trained from the config's seed.
inline IndexState<float> train_base(const RunConfig& cfg, const CorpusTimeline& tl,
                                    TrainReport* report = nullptr) {
  CorpusStore store(tl);
  EncoderConfig enc = cfg.encoder;
  return train_initial<float>(store, enc, cfg.train, cfg.seed, report);
}

inline void write_base_artifacts(const RunConfig& cfg, const IndexState<float>& base,
                                 const CorpusTimeline& tl, const TrainReport& report,
                                 const std::filesystem::path& dir) {
  save_checkpoint(base, dir / "checkpoints" / "t0", config_hash(cfg), "BASE");
  CorpusStore store(tl);
  const auto val = evaluate_queries(base.model, base.registry, store.val_queries(0), 0, cfg.train);
  const auto test = evaluate_queries(base.model, base.registry, store.test_queries(0), 0, cfg.train);
  nlohmann::ordered_json j;
  j["report"] = to_json(report);
  j["validation"] = {{"hits@1", val.hits1}, {"hits@10", val.hits10}, {"mrr@10", val.mrr10}};
  j["test"] = {{"hits@1", test.hits1}, {"hits@10", test.hits10}, {"mrr@10", test.mrr10}};
  write_file(dir / "base_metrics.json", j.dump(1) + "\n");
  write_file(dir / "config.json", to_json(cfg).dump(1) + "\n");
}

/// Full schedule from a base state; writes every artifact under the run
/// directory when `write` is set.
inline RunOutput run_experiment(const RunConfig& cfg, const CorpusTimeline& tl,
                                const IndexState<float>& base, bool write = true) {
  cfg.validate();
  RunOutput out;
  out.dir = run_directory(cfg);
  const std::string hash = config_hash(cfg);
  const std::string strategy = to_string(cfg.strategy);
  CorpusStore store(tl);
  TimestepHook<float> hook;
  if (write)
    hook = [&](int t, const IndexState<float>& st, const std::vector<CorpusMetrics>&) {
      IndexState<float> copy = st;
      copy.timestep = t;
      save_checkpoint(copy, out.dir / "checkpoints" / ("t" + std::to_string(t)), hash, strategy);
    };
  out.result = run_schedule<float>(base, store, cfg.strategy, cfg.prompt_setup(), cfg.train, cfg.seed, hook);
  const auto& r = out.result;
  const std::vector<const PerfMatrix*> mats = {&r.hits1, &r.hits10, &r.mrr10};
  out.summary = summary_json(strategy, mats, r.params);
  if (!write) return out;
  write_file(out.dir / "config.json", to_json(cfg).dump(1) + "\n");
  write_file(out.dir / "perf_matrix.csv", perf_matrix_csv(mats));
  write_file(out.dir / "trace.csv", trace_csv(mats));
  const auto util = utilization_stats<float>(r.selection_log, r.pool_size);
  write_file(out.dir / "utilization.csv", utilization_csv(util));
  write_file(out.dir / "selection_log.csv", selection_log_csv(r.selection_log));
  nlohmann::ordered_json reports = nlohmann::ordered_json::array();
  for (const auto& rep : r.reports) reports.push_back(to_json(rep));
  write_file(out.dir / "reports.json", reports.dump(1) + "\n");
  nlohmann::ordered_json summary = out.summary;
  summary["config_hash"] = hash;
  summary["continual_layer_invocations"] = r.continual_layer_invocations;
  summary["continual_seconds"] = r.continual_seconds;
  summary["utilization"] = {{"pool_size", util.pool_size},
                            {"prompts_used", util.prompts_used},
                            {"above_uniform", util.above_uniform},
                            {"concentration", util.concentration}};
  write_file(out.dir / "summary.json", summary.dump(1) + "\n");
  write_file(out.dir / "summary.csv", summary_csv(out.summary));
  return out;
}

}  // namespace promptdsi
