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

#include <cstdint>
#include <random>
#include <string_view>

#include "promptdsi/tensor.hpp"

namespace promptdsi {

using Rng = std::mt19937_64;

// Every random draw in a run descends from one seed through a named stream
// ("data", "init", "shuffle", "kmeans", ...), so changing how one stream is
// consumed never perturbs another.
inline Rng make_stream(std::uint64_t seed, std::string_view name,
                       std::uint64_t index = 0) {
  std::uint64_t h = fnv1a(&seed, sizeof(seed));
  h = fnv1a(name, h);
  h = fnv1a(&index, sizeof(index), h);
  std::seed_seq seq{std::uint32_t(h), std::uint32_t(h >> 32)};
  return Rng(seq);
}

}  // namespace promptdsi
