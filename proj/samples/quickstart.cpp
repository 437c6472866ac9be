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


// Trains a tiny base index, then adds two corpora with a frozen encoder and
// an L2P-style prompt pool. Prints the Hits@10 matrix and continual metrics.

#include <cstdio>

#include "promptdsi.hpp"

using namespace promptdsi;

int main() {
  RunConfig cfg;
  cfg.synthetic.vocab_size = 160;
  cfg.synthetic.num_topics = 3;
  cfg.synthetic.terms_per_topic = 10;
  cfg.synthetic.common_terms = 8;
  cfg.synthetic.docs_initial = 24;
  cfg.synthetic.docs_per_increment = 8;
  cfg.synthetic.increments = 2;
  cfg.synthetic.body_length = 20;
  cfg.synthetic.max_query_terms = 5;

  cfg.encoder.num_layers = 2;
  cfg.encoder.dim = 16;
  cfg.encoder.num_heads = 2;
  cfg.encoder.ff_dim = 32;
  cfg.encoder.max_seq_len = 8;
  cfg.encoder.vocab_size = 160;
  cfg.encoder.prompt_layers = {1, 2};

  cfg.train.base_epochs = 25;
  cfg.train.base_lr = 5e-3;
  cfg.train.epochs = 4;
  cfg.train.lr = 2e-3;
  cfg.train.batch_size = 16;

  cfg.pool.pool_size = 3;
  cfg.pool.prompt_length = 4;
  cfg.strategy = StrategyTag::kPromptL2P;
  cfg.validate();

  const CorpusTimeline tl = load_timeline(cfg);
  const IndexState<float> base = train_base(cfg, tl);
  const RunOutput out = run_experiment(cfg, tl, base, /*write=*/false);

  const PerfMatrix& P = out.result.hits10;
  std::printf("Hits@10 (row = after timestep, col = corpus)\n");
  for (std::size_t t = 0; t < P.rows(); ++t) {
    for (std::size_t i = 0; i <= t; ++i) std::printf(" %.3f", P.at(t, i));
    std::printf("\n");
  }
  const std::size_t T = P.rows() - 1;
  const ClMetrics m = cl_metrics(P, T);
  std::printf("A=%.3f LA=%.3f F=%.3f D0 drop=%.3f\n", *m.average, *m.learning_average,
              *m.forgetting, m.forgetting_d0);
  return 0;
}
