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

#include "kstar/diffusion.hpp"

#include <cmath>
#include <string>

#include "kstar/error.hpp"

namespace kstar {

NoiseSchedule::NoiseSchedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) fail(ErrorCode::BadRange, "diffusion step count must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    fail(ErrorCode::BadRange, "need 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) + ", " +
                                  std::to_string(beta_end));
  }
  beta_.resize(steps);
  alpha_bar_.resize(steps + 1);
  alpha_bar_[0] = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    beta_[i] = beta_start + (beta_end - beta_start) * frac;
    alpha_bar_[i + 1] = alpha_bar_[i] * (1.0 - beta_[i]);
  }
}

namespace {

void check_step(std::size_t k, const NoiseSchedule& s) {
  if (k < 1 || k > s.steps()) {
    fail(ErrorCode::BadStep, "step " + std::to_string(k) + " outside 1.." + std::to_string(s.steps()));
  }
}

void check_same(const ad::Tensor& a, const ad::Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::ShapeMismatch,
         std::string(what) + ": shapes " + ad::shape_string(a.shape()) + " and " + ad::shape_string(b.shape()));
  }
}

ad::Tensor affine(const ad::Tensor& x, double cx, const ad::Tensor& e, double ce) {
  ad::Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cx * x[i] + ce * e[i];
  return out;
}

}  // namespace

ad::Tensor add_noise(const ad::Tensor& a0, std::size_t k, const ad::Tensor& noise, const NoiseSchedule& schedule) {
  check_same(a0, noise, "add_noise");
  check_step(k, schedule);
  const double ab = schedule.alpha_bar(k);
  return affine(a0, std::sqrt(ab), noise, std::sqrt(1.0 - ab));
}

ad::Tensor add_noise_rows(const ad::Tensor& a0, std::span<const std::size_t> steps, const ad::Tensor& noise,
                          const NoiseSchedule& schedule) {
  check_same(a0, noise, "add_noise_rows");
  if (a0.rank() != 2 || steps.size() != a0.rows()) {
    fail(ErrorCode::ShapeMismatch, "add_noise_rows needs one step per row of a rank-2 tensor");
  }
  ad::Tensor out = a0;
  const std::size_t w = a0.cols();
  for (std::size_t r = 0; r < a0.rows(); ++r) {
    check_step(steps[r], schedule);
    const double ab = schedule.alpha_bar(steps[r]);
    const double cx = std::sqrt(ab), ce = std::sqrt(1.0 - ab);
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = cx * a0[r * w + c] + ce * noise[r * w + c];
  }
  return out;
}

ad::Tensor denoise_jump(const ad::Tensor& a_k, std::size_t k, std::size_t target, const ad::Tensor& pred_a0,
                        const NoiseSchedule& schedule, const ad::Tensor& eps_k) {
  check_step(k, schedule);
  if (target >= k) fail(ErrorCode::BadStep, "reverse target must precede step " + std::to_string(k));
  check_same(a_k, pred_a0, "denoise_step");
  check_same(a_k, eps_k, "denoise_step");
  const double ab = schedule.alpha_bar(target);
  return affine(pred_a0, std::sqrt(ab), eps_k, std::sqrt(1.0 - ab));
}

ad::Tensor denoise_step(const ad::Tensor& a_k, std::size_t k, const ad::Tensor& pred_a0, const NoiseSchedule& schedule,
                        const ad::Tensor& eps_k) {
  check_step(k, schedule);
  return denoise_jump(a_k, k, k - 1, pred_a0, schedule, eps_k);
}

std::vector<std::size_t> reverse_timesteps(const NoiseSchedule& schedule, std::size_t reverse_steps) {
  const std::size_t k = schedule.steps();
  if (reverse_steps == 0 || reverse_steps > k) {
    fail(ErrorCode::BadRange, "reverse steps must lie in 1.." + std::to_string(k));
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < reverse_steps; ++i) {
    // Evenly spaced from K down to K/reverse_steps, rounded.
    const double frac = static_cast<double>(reverse_steps - i) / static_cast<double>(reverse_steps);
    out.push_back(static_cast<std::size_t>(std::llround(frac * static_cast<double>(k))));
  }
  return out;
}

ad::Tensor standard_normal(const ad::Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> data(ad::shape_size(shape));
  for (double& v : data) v = n(rng);
  return ad::Tensor(shape, std::move(data));
}

ad::Tensor sample(const Denoiser& denoiser, const ad::Shape& shape, const NoiseSchedule& schedule,
                  std::size_t reverse_steps, std::mt19937_64& rng) {
  const auto steps = reverse_timesteps(schedule, reverse_steps);
  ad::Tensor a = standard_normal(shape, rng);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::size_t k = steps[i];
    const std::size_t target = i + 1 < steps.size() ? steps[i + 1] : 0;
    const ad::Tensor eps = target == 0 ? ad::Tensor::zeros(shape) : standard_normal(shape, rng);
    a = denoise_jump(a, k, target, denoiser(a, k), schedule, eps);
  }
  return a;
}

ad::Var loss_ee(const ad::Var& predicted_a0, const ad::Var& true_a0) {
  return ad::mean(ad::square(ad::sub(predicted_a0, true_a0)));
}

ad::Var loss_joint(const ad::Var& true_joints, const ad::Var& predicted_joints) {
  if (true_joints.shape() != predicted_joints.shape()) {
    fail(ErrorCode::LengthMismatch, "joint loss shapes " + ad::shape_string(true_joints.shape()) + " and " +
                                        ad::shape_string(predicted_joints.shape()));
  }
  return ad::mean(ad::square(ad::sub(true_joints, predicted_joints)));
}

ad::Var loss_total(const ad::Var& l_ee, const ad::Var& l_joint, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorCode::BadLambda, "lambda must lie in [0, 1]");
  return ad::add(ad::scale(l_ee, lambda), ad::scale(l_joint, 1.0 - lambda));
}

}  // namespace kstar
