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
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "kstar/autodiff.hpp"

namespace kstar {

/// Linear-beta DDPM schedule. Steps are indexed 1..K; alpha_bar(0) is 1.
class NoiseSchedule {
 public:
  /// Throws BadRange unless 0 < beta_start <= beta_end < 1 and steps > 0.
  NoiseSchedule(std::size_t steps, double beta_start = 1e-4, double beta_end = 2e-2);

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t k) const { return beta_.at(k - 1); }
  double alpha(std::size_t k) const { return 1.0 - beta(k); }
  /// Valid for k in 0..K.
  double alpha_bar(std::size_t k) const { return alpha_bar_.at(k); }
  const std::vector<double>& betas() const { return beta_; }

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;  // K + 1 entries
};

inline NoiseSchedule make_schedule(std::size_t steps, double beta_start = 1e-4, double beta_end = 2e-2) {
  return NoiseSchedule(steps, beta_start, beta_end);
}

/// sqrt(abar_k) a0 + sqrt(1 - abar_k) eps. Throws ShapeMismatch or BadStep.
ad::Tensor add_noise(const ad::Tensor& a0, std::size_t k, const ad::Tensor& noise, const NoiseSchedule& schedule);

/// Row r of a (batch, width) tensor is noised with step steps[r].
ad::Tensor add_noise_rows(const ad::Tensor& a0, std::span<const std::size_t> steps, const ad::Tensor& noise,
                          const NoiseSchedule& schedule);

/// a_{k-1} = sqrt(abar_{k-1}) pred_a0 + sqrt(1 - abar_{k-1}) eps_k. `a_k`
/// only fixes the expected shape.
ad::Tensor denoise_step(const ad::Tensor& a_k, std::size_t k, const ad::Tensor& pred_a0, const NoiseSchedule& schedule,
                        const ad::Tensor& eps_k);

/// Same affine form, jumping from step k straight to `target` < k.
ad::Tensor denoise_jump(const ad::Tensor& a_k, std::size_t k, std::size_t target, const ad::Tensor& pred_a0,
                        const NoiseSchedule& schedule, const ad::Tensor& eps_k);

/// Reverse-process step sequence with `reverse_steps` evaluations, from K
/// down to 1 and evenly spaced; reverse_steps = 1 yields {K}.
std::vector<std::size_t> reverse_timesteps(const NoiseSchedule& schedule, std::size_t reverse_steps);

/// Predicts a_0 from (a_k, k) for a whole batch.
using Denoiser = std::function<ad::Tensor(const ad::Tensor& a_k, std::size_t k)>;

/// Runs the reverse loop from standard-normal noise of `shape`. Fresh
/// noise is drawn at every step except the last, whose target is step 0.
ad::Tensor sample(const Denoiser& denoiser, const ad::Shape& shape, const NoiseSchedule& schedule,
                  std::size_t reverse_steps, std::mt19937_64& rng);

ad::Tensor standard_normal(const ad::Shape& shape, std::mt19937_64& rng);

/// Mean squared error between the predicted and true a_0.
ad::Var loss_ee(const ad::Var& predicted_a0, const ad::Var& true_a0);
/// Mean squared error over joint values. Throws LengthMismatch.
ad::Var loss_joint(const ad::Var& true_joints, const ad::Var& predicted_joints);
/// lambda * l_ee + (1 - lambda) * l_joint. Throws BadLambda outside [0, 1].
ad::Var loss_total(const ad::Var& l_ee, const ad::Var& l_joint, double lambda);

}  // namespace kstar
