// Copyright 2026 The qdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "qdiff/error.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

// Arrays are indexed by timestep t = 0..T; index 0 holds alpha_bar_0 = 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> posterior_vars;

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t)); }
  double posterior_var(int t) const { return posterior_vars.at(static_cast<std::size_t>(t)); }

  // Posterior variance between two arbitrary steps t > prev:
  // (1 - abar_prev) / (1 - abar_t) * (1 - abar_t / abar_prev).
  // Equals posterior_var(t) when prev == t - 1.
  double posterior_var(int t, int prev) const {
    const double ab_t = alpha_bar(t), ab_prev = alpha_bar(prev);
    return (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
  }
};

inline void check_schedule(const NoiseSchedule& s) {
  require(s.steps >= 2, ErrorKind::kParameter, "schedule needs at least 2 steps");
  for (int t = 1; t <= s.steps; ++t) {
    require(s.beta(t) > 0.0 && s.beta(t) < 1.0, ErrorKind::kParameter,
            "beta_" + std::to_string(t) + " outside (0, 1)");
    require(s.alpha_bar(t) < s.alpha_bar(t - 1), ErrorKind::kParameter,
            "alpha_bar is not strictly decreasing at t=" + std::to_string(t));
  }
  require(s.posterior_var(1) == 0.0, ErrorKind::kParameter, "posterior variance at t=1 must be 0");
  require(s.alpha_bar(s.steps) < 0.01, ErrorKind::kParameter,
          "alpha_bar_T must be < 0.01 so x_T is close to pure noise");
}

inline NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  require(steps >= 2, ErrorKind::kParameter, "T_train must be >= 2");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorKind::kParameter,
          "need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  const auto n = static_cast<std::size_t>(steps) + 1;
  s.betas.assign(n, 0.0);
  s.alphas.assign(n, 1.0);
  s.alpha_bars.assign(n, 1.0);
  s.posterior_vars.assign(n, 0.0);
  for (int t = 1; t <= steps; ++t) {
    const auto i = static_cast<std::size_t>(t);
    s.betas[i] = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) /
                                  static_cast<double>(steps - 1);
    s.alphas[i] = 1.0 - s.betas[i];
    s.alpha_bars[i] = s.alpha_bars[i - 1] * s.alphas[i];
    s.posterior_vars[i] = (1.0 - s.alpha_bars[i - 1]) / (1.0 - s.alpha_bars[i]) * s.betas[i];
  }
  return s;
}

inline NoiseSchedule default_schedule() { return make_linear_schedule(1000, 1e-4, 0.02); }

// Deployed step subsequence, noise end first.
struct SamplerPlan {
  std::vector<int> steps;
  double eta = 0.0;

  std::size_t size() const noexcept { return steps.size(); }
};

inline void check_plan(const SamplerPlan& plan, const NoiseSchedule& s) {
  require(plan.steps.size() >= 2, ErrorKind::kParameter, "sampler plan needs >= 2 steps");
  require(plan.steps.front() == s.steps && plan.steps.back() == 1, ErrorKind::kParameter,
          "sampler plan must run from T_train down to 1");
  for (std::size_t i = 1; i < plan.steps.size(); ++i) {
    require(plan.steps[i] < plan.steps[i - 1], ErrorKind::kParameter,
            "sampler plan must be strictly decreasing");
  }
  require(plan.eta >= 0.0, ErrorKind::kParameter, "eta must be >= 0");
}

// steps[i] = 1 + round((T-1) (S-1-i) / (S-1)) with round-half-up in integers.
inline SamplerPlan make_uniform_plan(const NoiseSchedule& s, int sample_steps, double eta = 0.0) {
  require(sample_steps >= 2 && sample_steps <= s.steps, ErrorKind::kParameter,
          "T_sample must be in [2, T_train]");
  SamplerPlan plan;
  plan.eta = eta;
  const long long span = s.steps - 1, denom = sample_steps - 1;
  for (int i = 0; i < sample_steps; ++i) {
    const long long k = sample_steps - 1 - i;
    plan.steps.push_back(static_cast<int>(1 + (span * k * 2 + denom) / (2 * denom)));
  }
  check_plan(plan, s);
  return plan;
}

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one timestep per row.
template <typename T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& x0, std::span<const int> t,
                   const Tensor<T>& eps) {
  require(x0.shape() == eps.shape(), ErrorKind::kShape, "eps must match x0");
  require(t.size() == x0.rows(), ErrorKind::kShape, "one timestep per row required");
  Tensor<T> out(x0.shape());
  const std::size_t cols = x0.cols();
  for (std::size_t r = 0; r < x0.rows(); ++r) {
    require(t[r] >= 1 && t[r] <= s.steps, ErrorKind::kParameter,
            "timestep " + std::to_string(t[r]) + " outside [1, T_train]");
    const T a = static_cast<T>(std::sqrt(s.alpha_bar(t[r])));
    const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t[r])));
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = a * x0(r, c) + b * eps(r, c);
  }
  return out;
}

template <typename T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& x0, int t, const Tensor<T>& eps) {
  const std::vector<int> ts(x0.rows(), t);
  return q_sample(s, x0, std::span<const int>(ts), eps);
}

}  // namespace qdiff
