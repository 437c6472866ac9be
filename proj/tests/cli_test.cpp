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
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "promptdsi.hpp"

#ifndef PROMPTDSI_CLI
#error "PROMPTDSI_CLI must name the command-line binary"
#endif

namespace promptdsi {
namespace {

namespace fs = std::filesystem;

class Scratch {
 public:
  Scratch() {
    root_ = fs::temp_directory_path() /
            (std::string("promptdsi-cli-") +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Scratch() { fs::remove_all(root_); }
  fs::path operator/(const std::string& s) const { return root_ / s; }
  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
};

// A config small enough to train in well under a second.
nlohmann::json small_config_json(const fs::path& out) {
  auto j = nlohmann::json::parse(R"({
    "data": {"synthetic": {"vocab_size": 160, "num_topics": 3, "terms_per_topic": 10,
                           "common_terms": 8, "docs_initial": 24, "docs_per_increment": 8,
                           "increments": 2, "body_length": 20, "max_query_terms": 5}},
    "encoder": {"num_layers": 2, "dim": 16, "num_heads": 2, "ff_dim": 32, "max_seq_len": 8,
                "vocab_size": 160, "prompt_layers": [1, 2]},
    "strategy": "PROMPTDSI_L2P",
    "train": {"base_epochs": 10, "base_lr": 0.005, "epochs": 2, "batch_size": 16, "num_topics": 3},
    "pool": {"pool_size": 3, "prompt_length": 4, "coda_prompt_length": 4},
    "seed": 3
  })");
  j["out"] = out.string();
  return j;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(PROMPTDSI_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return -1;
  std::string text;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, p)) text.append(buf, n);
  const int status = pclose(p);
  if (output) *output = text;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(1); }

TEST(Config, RoundTripsThroughJson) {
  auto cfg = run_config_from_json(small_config_json("runs"));
  EXPECT_EQ(cfg.strategy, StrategyTag::kPromptL2P);
  EXPECT_EQ(cfg.encoder.prompt_layers, (std::vector<int>{1, 2}));
  auto again = run_config_from_json(nlohmann::json::parse(to_json(cfg).dump()));
  EXPECT_EQ(to_json(again).dump(), to_json(cfg).dump());
  EXPECT_EQ(config_hash(again), config_hash(cfg));
}

TEST(Config, HashIgnoresOutputButNotSettings) {
  auto a = run_config_from_json(small_config_json("x"));
  auto b = run_config_from_json(small_config_json("y"));
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 4;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Config, RejectsUnknownKeysBadTypesAndBadValues) {
  auto j = small_config_json("runs");
  j["train"]["epoch"] = 3;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = small_config_json("runs");
  j["seed"] = "one";
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = small_config_json("runs");
  j["encoder"]["num_heads"] = 3;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = small_config_json("runs");
  j["strategy"] = "PROMPTDSI_XYZ";
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = small_config_json("runs");
  j["pool"]["prompt_length"] = 5;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = small_config_json("runs");
  j["encoder"]["vocab_size"] = 100;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  Scratch dir;
  auto cfg = run_config_from_json(small_config_json(dir.root()));
  const auto tl = load_timeline(cfg);
  auto base = train_base(cfg, tl);
  auto out = run_experiment(cfg, tl, base, true);
  const auto ck = out.dir / "checkpoints" / "t2";
  ASSERT_TRUE(fs::exists(ck / "manifest.json"));
  auto st = load_checkpoint(ck);
  EXPECT_EQ(st.timestep, 2);
  EXPECT_EQ(st.registry.size(), 40u);
  ASSERT_TRUE(st.model.pool.has_value());
  EXPECT_EQ(st.model.pool->size(), 3u);
  // The base checkpoint embeds queries exactly like the in-memory base.
  auto t0 = load_checkpoint(out.dir / "checkpoints" / "t0");
  CorpusStore store(tl);
  auto queries = make_examples(store.test_queries(0), base.registry);
  std::vector<std::vector<int>> seqs;
  for (const auto& e : queries) seqs.push_back(e.tokens);
  auto h1 = embed_queries(base.model, std::span<const std::vector<int>>(seqs)).h;
  auto h2 = embed_queries(t0.model, std::span<const std::vector<int>>(seqs)).h;
  EXPECT_EQ(digest(h1), digest(h2));
  // Saving the reloaded state reproduces the tensor digests in the manifest.
  save_checkpoint(st, dir / "resaved", config_hash(cfg), "PROMPTDSI_L2P");
  auto m1 = nlohmann::json::parse(read_file(ck / "manifest.json"));
  auto m2 = nlohmann::json::parse(read_file(dir / "resaved" / "manifest.json"));
  EXPECT_EQ(m1["tensors"], m2["tensors"]);
}

TEST(Checkpoint, CorruptionIsADataError) {
  Scratch dir;
  auto cfg = run_config_from_json(small_config_json(dir.root()));
  const auto tl = load_timeline(cfg);
  auto base = train_base(cfg, tl);
  save_checkpoint(base, dir / "ck", config_hash(cfg), "BASE");
  for (const auto& entry : fs::directory_iterator(dir / "ck"))
    if (entry.path().extension() == ".f32") {
      std::fstream f(entry.path(), std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(0);
      f.put('\x7f');
      break;
    }
  EXPECT_THROW(load_checkpoint(dir / "ck"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing"), DataError);
}

TEST(Cli, ContinueThenEvalReproducesTheRow) {
  Scratch dir;
  write_json(dir / "cfg.json", small_config_json(dir / "runs"));
  std::string out;
  ASSERT_EQ(run_cli("continue -c " + (dir / "cfg.json").string(), &out), 0) << out;
  auto cfg = run_config_from_json(small_config_json(dir / "runs"));
  const auto run = run_directory(cfg);
  for (const char* f : {"perf_matrix.csv", "trace.csv", "summary.json", "summary.csv",
                        "utilization.csv", "selection_log.csv", "reports.json", "config.json",
                        "base_metrics.json"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  const auto ck = run / "checkpoints" / "t2";
  ASSERT_EQ(run_cli("eval -c " + (dir / "cfg.json").string() + " --checkpoint " + ck.string() +
                        " --csv " + (dir / "row.csv").string(),
                    &out),
            0)
      << out;
  auto mats = parse_perf_matrix_csv(read_file(run / "perf_matrix.csv"));
  std::istringstream rows(read_file(dir / "row.csv"));
  std::string line;
  std::getline(rows, line);
  int n = 0;
  while (std::getline(rows, line)) {
    std::istringstream f(line);
    std::string t, i, metric, value;
    std::getline(f, t, ',');
    std::getline(f, i, ',');
    std::getline(f, metric, ',');
    std::getline(f, value, ',');
    EXPECT_EQ(t, "2");
    const PerfMatrix* m = nullptr;
    for (const auto& candidate : mats)
      if (candidate.metric() == metric) m = &candidate;
    ASSERT_NE(m, nullptr) << metric;
    EXPECT_EQ(m->at(2, std::stoul(i)), std::stod(value)) << line;
    ++n;
  }
  EXPECT_EQ(n, 9);
  ASSERT_EQ(run_cli("report " + run.string(), &out), 0) << out;
  EXPECT_NE(out.find("PROMPTDSI_L2P"), std::string::npos);
}

TEST(Cli, GenDataWritesALoadableTimeline) {
  Scratch dir;
  write_json(dir / "cfg.json", small_config_json(dir / "runs"));
  std::string out;
  ASSERT_EQ(run_cli("gen-data -c " + (dir / "cfg.json").string() + " -p " +
                        (dir / "tl.jsonl.gz").string(),
                    &out),
            0)
      << out;
  auto cfg = run_config_from_json(small_config_json("runs"));
  EXPECT_EQ(load_jsonl((dir / "tl.jsonl.gz").string()), generate_corpora(cfg.synthetic));
}

TEST(Cli, ExitCodes) {
  Scratch dir;
  write_json(dir / "cfg.json", small_config_json(dir / "runs"));
  auto bad = small_config_json(dir / "runs");
  bad["bogus"] = 1;
  write_json(dir / "bad.json", bad);
  const std::string cfg = " -c " + (dir / "cfg.json").string();
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("continue -c " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("continue" + cfg + " -s NOPE"), 2);
  EXPECT_EQ(run_cli("continue" + cfg + " --data " + (dir / "none.jsonl").string()), 3);
  std::ofstream(dir / "broken.jsonl") << "{not json\n";
  EXPECT_EQ(run_cli("train-base" + cfg + " --data " + (dir / "broken.jsonl").string()), 3);
  EXPECT_EQ(run_cli("eval" + cfg + " --checkpoint " + (dir / "nowhere").string()), 3);
  EXPECT_EQ(run_cli("--help"), 0);
}

}  // namespace
}  // namespace promptdsi
