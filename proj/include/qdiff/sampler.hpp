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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qdiff/network.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/schedule.hpp"

namespace qdiff {

// Noise models are anything with an ADL-visible
//   Tensor<T> predict_noise(const Model&, const Tensor<T>& x, std::span<const int> t)
template <typename T>
Tensor<T> predict_noise(const NoisePredictor<T>& net, const Tensor<T>& x, std::span<const int> t) {
  return predict(net, x, t);
}

template <typename T>
struct Trajectory {
  std::vector<int> t;             // timestep of each recorded state, noise end first
  std::vector<Tensor<T>> states;  // model input at that step, (batch, dim)
  Tensor<T> final_sample;
};

// Row i of x_T is drawn from rng.split(i); stochastic noise for row i at plan
// index j comes from rng.split(i).split(j + 1). Batch size therefore never
// changes any individual trajectory.
template <typename T>
Tensor<T> initial_noise(const Rng& rng, std::size_t batch, std::size_t dim) {
  Tensor<T> x({batch, dim});
  for (std::size_t i = 0; i < batch; ++i) {
    Rng r = rng.split(i);
    for (std::size_t d = 0; d < dim; ++d) x(i, d) = static_cast<T>(r.normal());
  }
  return x;
}

// Called with (plan index, t, model input, predicted noise) before each update.
template <typename T>
using StepObserver = std::function<void(std::size_t, int, const Tensor<T>&, const Tensor<T>&)>;

// One deterministic-or-stochastic DDIM update from step t to prev (0 = final):
//   x0_hat = (x - sqrt(1 - ab_t) eps) / sqrt(ab_t)
//   x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps + sigma z,
//   sigma^2 = eta^2 * posterior_var(t, prev), zero at the final step.
template <typename T>
Tensor<T> ddim_step(const NoiseSchedule& s, const Tensor<T>& x, const Tensor<T>& eps, int t,
                    int prev, double eta, const Tensor<T>* z) {
  const double ab_t = s.alpha_bar(t), ab_prev = s.alpha_bar(prev);
  const double sigma2 = prev == 0 ? 0.0 : eta * eta * s.posterior_var(t, prev);
  const double c_x0 = std::sqrt(ab_prev);
  const double c_eps = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma2));
  const double sigma = std::sqrt(sigma2);
  const double sq_t = std::sqrt(ab_t), sq_1m_t = std::sqrt(1.0 - ab_t);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = eps[i];
    const double x0_hat = (static_cast<double>(x[i]) - sq_1m_t * e) / sq_t;
    double v = c_x0 * x0_hat + c_eps * e;
    if (sigma > 0.0 && z != nullptr) v += sigma * static_cast<double>((*z)[i]);
    out[i] = static_cast<T>(v);
  }
  return out;
}

// Runs plan indices start..end from state x (the model input at plan index
// `start`). Rows keep their identity in `rng` via split(row_offset + i).
template <typename T, typename Model>
Trajectory<T> ddim_continue(const Model& model, const NoiseSchedule& s, const SamplerPlan& plan,
                            Tensor<T> x, std::size_t start, const Rng& rng, bool record,
                            const StepObserver<T>& observer = {}, std::size_t row_offset = 0) {
  check_plan(plan, s);
  require(start < plan.size(), ErrorKind::kParameter, "start index outside the plan");
  Trajectory<T> traj;
  const std::size_t batch = x.rows(), dim = x.cols();
  std::vector<int> tv(batch);
  for (std::size_t j = start; j < plan.size(); ++j) {
    const int t = plan.steps[j];
    const int prev = j + 1 < plan.size() ? plan.steps[j + 1] : 0;
    if (record) {
      traj.t.push_back(t);
      traj.states.push_back(x);
    }
    std::fill(tv.begin(), tv.end(), t);
    Tensor<T> eps;
    try {
      eps = predict_noise(model, x, std::span<const int>(tv));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNumeric) throw;
      fail(ErrorKind::kSampling, "step " + std::to_string(j) + " (t=" + std::to_string(t) +
                                     "): " + e.what());
    }
    if (observer) observer(j, t, x, eps);
    Tensor<T> z;
    if (plan.eta > 0.0 && prev != 0) {
      z = Tensor<T>({batch, dim});
      for (std::size_t i = 0; i < batch; ++i) {
        Rng r = rng.split(row_offset + i).split(j + 1);
        for (std::size_t d = 0; d < dim; ++d) z(i, d) = static_cast<T>(r.normal());
      }
    }
    x = ddim_step(s, x, eps, t, prev, plan.eta, z.empty() ? nullptr : &z);
    require(x.all_finite(), ErrorKind::kSampling,
            "non-finite state after step " + std::to_string(j) + " (t=" + std::to_string(t) + ")");
  }
  traj.final_sample = std::move(x);
  return traj;
}

template <typename T, typename Model>
Trajectory<T> ddim_sample(const Model& model, const NoiseSchedule& s, const SamplerPlan& plan,
                          std::size_t batch, std::size_t dim, const Rng& rng, bool record,
                          const StepObserver<T>& observer = {}) {
  return ddim_continue<T>(model, s, plan, initial_noise<T>(rng, batch, dim), 0, rng, record,
                          observer);
}

}  // namespace qdiff
