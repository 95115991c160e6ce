// Copyright 2026 The ctgshift Authors.
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

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ctgshift {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values or malformed config files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A statistic was requested on a sample that cannot support it
// (empty set, zero variance, too few points).
class DegenerateSampleError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition (dimension mismatch, length mismatch).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// A metric is mathematically undefined on the given input.
class MetricUndefinedError : public Error {
 public:
  using Error::Error;
};

// Environment partitioning could not produce K non-empty buckets.
class PartitionError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(std::size_t step, const std::string& what)
      : Error("training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace ctgshift
