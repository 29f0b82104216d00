// Copyright 2026 The KStar Authors
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
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "kstar/autodiff.hpp"

namespace kstar {

/// Named, ordered collection of trainable tensors. The order is the
/// serialization order of checkpoints.
class ParamSet {
 public:
  /// Returns the index of the new parameter. Names must be unique.
  std::size_t add(std::string name, ad::Tensor value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const ad::Tensor& value(std::size_t i) const { return values_[i]; }
  ad::Tensor& value(std::size_t i) { return values_[i]; }
  /// Throws SchemaViolation for unknown names.
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;
  /// Total scalar count.
  std::size_t scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor> values_;
};

/// Every parameter of a ParamSet recorded as a leaf on one tape.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParamSet& params);

  const ad::Var& operator[](std::size_t i) const { return vars_[i]; }
  const ad::Var& get(std::string_view name) const { return vars_[params_->index(name)]; }
  const std::vector<ad::Var>& vars() const { return vars_; }

 private:
  const ParamSet* params_;
  std::vector<ad::Var> vars_;
};

/// Glorot-uniform (fan_in, fan_out) matrix.
ad::Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

}  // namespace kstar
