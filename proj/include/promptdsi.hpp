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

#include "promptdsi/checkpoint.hpp"
#include "promptdsi/config.hpp"
#include "promptdsi/continual.hpp"
#include "promptdsi/data.hpp"
#include "promptdsi/encoder.hpp"
#include "promptdsi/errors.hpp"
#include "promptdsi/eval.hpp"
#include "promptdsi/model.hpp"
#include "promptdsi/numerics.hpp"
#include "promptdsi/pipeline.hpp"
#include "promptdsi/prompts.hpp"
#include "promptdsi/report.hpp"
#include "promptdsi/retrieval.hpp"
#include "promptdsi/rng.hpp"
#include "promptdsi/tensor.hpp"
#include "promptdsi/topics.hpp"
