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
#include <span>
#include <vector>

#include "qdiff/error.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed list of parameter tensors:
//   p -= lr / (1 - b1^k) * m / (sqrt(v) / sqrt(1 - b2^k) + eps)
template <typename T>
class Adam {
 public:
  Adam(AdamConfig config, std::span<Tensor<T>* const> params) : config_(config) {
    for (Tensor<T>* p : params) {
      params_.push_back(p);
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  void set_lr(double lr) noexcept { config_.lr = lr; }
  long long steps() const noexcept { return step_; }

  void step(std::span<const Tensor<T>* const> grads) {
    require(grads.size() == params_.size(), ErrorKind::kParameter, "gradient count mismatch");
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = std::sqrt(1.0 - std::pow(config_.beta2, static_cast<double>(step_)));
    const T b1 = T(config_.beta1), b2 = T(config_.beta2);
    const T step_size = T(config_.lr / bc1), inv_bc2 = T(1.0 / bc2), eps = T(config_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (grads[k] == nullptr) continue;
      Tensor<T>& p = *params_[k];
      const Tensor<T>& g = *grads[k];
      require(g.shape() == p.shape(), ErrorKind::kShape, "gradient shape mismatch");
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (T{1} - b1) * g[i];
        v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
        p[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_bc2 + eps);
      }
    }
  }

 private:
  AdamConfig config_;
  std::vector<Tensor<T>*> params_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  long long step_ = 0;
};

}  // namespace qdiff
