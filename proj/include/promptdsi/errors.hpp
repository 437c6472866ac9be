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

#include <stdexcept>
#include <string>

namespace promptdsi {

// Error taxonomy. The CLI maps each family onto an exit status:
// ConfigError -> 2, DataError -> 3, everything else -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Broken caller contract: shape mismatch, stale selection, training a
// frozen tensor, reading data a rehearsal-free strategy may not see.
class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Zero-norm vectors handed to cosine-based operations.
class DomainError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public DataError {
 public:
  using DataError::DataError;
};

#define PROMPTDSI_REQUIRE(cond, ErrType, msg)                      \
  do {                                                             \
    if (!(cond)) throw ErrType(std::string(__func__) + ": " + (msg)); \
  } while (0)

}  // namespace promptdsi
