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

// promptdsi: data generation, training, continual indexing and reports.
//
// Exit status: 0 success, 2 configuration error, 3 data error, 4 runtime or
// numeric error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "promptdsi.hpp"

namespace fs = std::filesystem;
using namespace promptdsi;

namespace {

struct Common {
  std::string config;
  std::string data;
  std::string out;
  std::string strategy;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool with_strategy = true) {
  cmd->add_option("-c,--config", c.config, "RunConfig JSON (defaults when omitted)");
  cmd->add_option("--data", c.data, "JSONL corpus (overrides the config)");
  cmd->add_option("-o,--out", c.out, "output root (overrides the config)");
  cmd->add_option("--seed", c.seed, "seed (overrides the config)");
  if (with_strategy) cmd->add_option("-s,--strategy", c.strategy, "strategy tag (overrides the config)");
}

RunConfig resolve(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw ConfigError("cannot open config " + c.config);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(c.config + ": " + e.what());
    }
  }
  if (!c.data.empty()) j["data"] = {{"path", c.data}};
  if (!c.out.empty()) j["out"] = c.out;
  if (!c.strategy.empty()) j["strategy"] = c.strategy;
  if (c.seed) j["seed"] = *c.seed;
  return run_config_from_json(j);
}

void print_summary(const nlohmann::ordered_json& s) {
  std::printf("%-22s D0 hits@10 %.4f  A hits@10 %.4f  F hits@10 %.4f  LA hits@10 %.4f  params %llu\n",
              s["strategy"].get<std::string>().c_str(), s["D0"]["hits@10"].get<double>(),
              s["A"]["hits@10"].is_null() ? 0.0 : s["A"]["hits@10"].get<double>(),
              s["F"]["hits@10"].is_null() ? 0.0 : s["F"]["hits@10"].get<double>(),
              s["LA"]["hits@10"].is_null() ? 0.0 : s["LA"]["hits@10"].get<double>(),
              static_cast<unsigned long long>(s["params"].get<std::uint64_t>()));
}

IndexState<float> base_for(const RunConfig& cfg, const CorpusTimeline& tl, const std::string& checkpoint,
                           bool write) {
  if (!checkpoint.empty()) return load_checkpoint(checkpoint);
  TrainReport rep;
  auto base = train_base(cfg, tl, &rep);
  if (write) write_base_artifacts(cfg, base, tl, rep, run_directory(cfg));
  return base;
}

int cmd_gen_data(const Common& c, const std::string& path) {
  RunConfig cfg = resolve(c);
  if (!cfg.data_path.empty()) throw ConfigError("gen-data needs a synthetic data spec, not a path");
  if (c.seed) cfg.synthetic.seed = *c.seed;
  const auto tl = generate_corpora(cfg.synthetic);
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  save_jsonl(tl, path);
  std::size_t docs = 0, queries = 0;
  for (const auto& corpus : tl.corpora) {
    docs += corpus.documents.size();
    queries += corpus.queries.size();
  }
  std::printf("wrote %s: %zu corpora, %zu documents, %zu queries\n", path.c_str(), tl.size(), docs, queries);
  return 0;
}

int cmd_train_base(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto tl = load_timeline(cfg);
  TrainReport rep;
  auto base = train_base(cfg, tl, &rep);
  const auto dir = run_directory(cfg);
  write_base_artifacts(cfg, base, tl, rep, dir);
  std::printf("base model: %zu steps in %.1fs, final loss %.4f\n", rep.steps, rep.seconds,
              rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back());
  std::printf("%s\n", (dir / "checkpoints" / "t0").string().c_str());
  return 0;
}

int cmd_continue(const Common& c, const std::string& checkpoint) {
  const RunConfig cfg = resolve(c);
  const auto tl = load_timeline(cfg);
  auto base = base_for(cfg, tl, checkpoint, true);
  auto out = run_experiment(cfg, tl, base, true);
  print_summary(out.summary);
  std::printf("%s\n", out.dir.string().c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& csv_out) {
  const RunConfig cfg = resolve(c);
  const auto tl = load_timeline(cfg);
  const auto st = load_checkpoint(checkpoint);
  CorpusStore store(tl);
  store.begin_timestep(st.timestep, false);
  const auto row = evaluate_row(st.model, st.registry, store, st.timestep, cfg.train);
  std::string text = "t,i,metric,value\n";
  const std::string t = std::to_string(st.timestep);
  for (const char* metric : {"hits@1", "hits@10", "mrr@10"})
    for (const auto& m : row) {
      const double v = std::string(metric) == "hits@1" ? m.hits1 : std::string(metric) == "hits@10" ? m.hits10 : m.mrr10;
      text += t + "," + std::to_string(m.corpus) + "," + metric + "," + fmt_double(v) + "\n";
    }
  if (!csv_out.empty()) write_file(csv_out, text);
  std::cout << text;
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  const auto mats = parse_perf_matrix_csv(read_file(dir / "perf_matrix.csv"));
  std::vector<const PerfMatrix*> ptrs;
  for (const auto& m : mats) ptrs.push_back(&m);
  std::uint64_t params = 0;
  std::string strategy = "?";
  if (fs::exists(dir / "summary.json")) {
    const auto s = nlohmann::json::parse(read_file(dir / "summary.json"));
    params = s.value("params", std::uint64_t{0});
    strategy = s.value("strategy", std::string("?"));
  }
  const auto summary = summary_json(strategy, ptrs, params);
  write_file(dir / "summary.csv", summary_csv(summary));
  write_file(dir / "trace.csv", trace_csv(ptrs));
  print_summary(summary);
  std::cout << read_file(dir / "trace.csv");
  return 0;
}

int cmd_bench_pass(const Common& c, const std::string& checkpoint) {
  RunConfig cfg = resolve(c);
  if (!is_prompt_strategy(cfg.strategy)) throw ConfigError("bench-pass needs a PromptDSI strategy");
  if (is_naive(cfg.strategy)) cfg.strategy = toggle_selection(cfg.strategy);
  const auto tl = load_timeline(cfg);
  const auto base = base_for(cfg, tl, checkpoint, false);
  RunConfig naive = cfg;
  naive.strategy = toggle_selection(cfg.strategy);
  naive.encoder.selection = SelectionMode::kTwoPassCls;
  const auto single = run_experiment(cfg, tl, base, false);
  const auto two = run_experiment(naive, tl, base, false);
  const auto& a = single.result;
  const auto& b = two.result;
  const double ratio = double(b.continual_layer_invocations) / double(a.continual_layer_invocations);
  auto micro = [](const ScheduleResult<float>& r, const CorpusTimeline& timeline) {
    double hits = 0, n = 0;
    const auto& row = r.hits10.row(r.hits10.rows() - 1);
    for (std::size_t i = 0; i < row.size(); ++i) {
      const double q = double(timeline.corpora[i].queries_in(Split::kTest).size());
      hits += row[i] * q;
      n += q;
    }
    return hits / n;
  };
  nlohmann::ordered_json j;
  j["single_pass"] = {{"strategy", to_string(cfg.strategy)},
                      {"layer_invocations", a.continual_layer_invocations},
                      {"seconds", a.continual_seconds},
                      {"hits@10", micro(a, tl)}};
  j["two_pass"] = {{"strategy", to_string(naive.strategy)},
                   {"layer_invocations", b.continual_layer_invocations},
                   {"seconds", b.continual_seconds},
                   {"hits@10", micro(b, tl)}};
  j["invocation_ratio"] = ratio;
  j["wall_speedup"] = b.continual_seconds / a.continual_seconds;
  write_file(fs::path(cfg.out_dir) / ("bench-" + config_hash(cfg) + ".json"), j.dump(1) + "\n");
  std::cout << j.dump(1) << "\n";
  return 0;
}

int cmd_seed_sweep(const Common& c, const std::vector<std::uint64_t>& seeds) {
  const RunConfig cfg0 = resolve(c);
  if (seeds.empty()) throw ConfigError("seed-sweep needs at least one seed");
  std::map<std::string, std::vector<double>> values;
  std::vector<std::string> order;
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (auto seed : seeds) {
    RunConfig cfg = cfg0;
    cfg.seed = seed;
    const auto tl = load_timeline(cfg);
    const auto base = base_for(cfg, tl, "", true);
    const auto out = run_experiment(cfg, tl, base, true);
    print_summary(out.summary);
    runs.push_back({{"seed", seed}, {"dir", out.dir.string()}});
    for (const char* block : {"D0", "A", "F", "LA"})
      for (const auto& [metric, v] : out.summary[block].items()) {
        if (v.is_null()) continue;
        const std::string key = std::string(block) + "." + metric;
        if (!values.count(key)) order.push_back(key);
        values[key].push_back(v.get<double>());
      }
  }
  std::string csv = "key,mean,std,n\n";
  nlohmann::ordered_json agg;
  for (const auto& key : order) {
    const auto& v = values[key];
    double mean = 0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0;
    agg[key] = {{"mean", mean}, {"std", sd}, {"n", v.size()}};
    csv += key + "," + fmt_double(mean) + "," + fmt_double(sd) + "," + std::to_string(v.size()) + "\n";
    std::printf("%-16s %.4f ± %.4f\n", key.c_str(), mean, sd);
  }
  nlohmann::ordered_json j;
  j["strategy"] = to_string(cfg0.strategy);
  j["runs"] = runs;
  j["aggregate"] = agg;
  const fs::path root(cfg0.out_dir);
  const std::string tag = "sweep-" + to_string(cfg0.strategy);
  write_file(root / (tag + ".json"), j.dump(1) + "\n");
  write_file(root / (tag + ".csv"), csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PromptDSI: rehearsal-free continual indexing for classification DSI"};
  app.require_subcommand(1);
  Common common;
  std::string path, checkpoint, run_dir, csv_out;
  std::vector<std::uint64_t> seeds{1, 2, 3};

  auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus timeline as JSONL");
  add_common(gen, common, false);
  gen->add_option("-p,--path", path, "output JSONL (.gz for gzip)")->required();

  auto* base = app.add_subcommand("train-base", "train Theta_0 on D_0");
  add_common(base, common);

  auto* cont = app.add_subcommand("continue", "run the continual schedule D_1..D_T");
  add_common(cont, common);
  cont->add_option("--checkpoint", checkpoint, "base checkpoint directory (trains one when omitted)");

  auto* ev = app.add_subcommand("eval", "recompute the PerfMatrix row of a checkpoint");
  add_common(ev, common, false);
  ev->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  ev->add_option("--csv", csv_out, "also write the row here");

  auto* rep = app.add_subcommand("report", "render summary and trace from a run directory");
  rep->add_option("run_dir", run_dir, "run directory")->required();

  auto* bench = app.add_subcommand("bench-pass", "single-pass vs two-pass selection cost");
  add_common(bench, common);
  bench->add_option("--checkpoint", checkpoint, "base checkpoint directory");

  auto* sweep = app.add_subcommand("seed-sweep", "repeat a run over seeds, mean and std");
  add_common(sweep, common);
  sweep->add_option("--seeds", seeds, "seeds")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(common, path);
    if (*base) return cmd_train_base(common);
    if (*cont) return cmd_continue(common, checkpoint);
    if (*ev) return cmd_eval(common, checkpoint, csv_out);
    if (*rep) return cmd_report(run_dir);
    if (*bench) return cmd_bench_pass(common, checkpoint);
    if (*sweep) return cmd_seed_sweep(common, seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
