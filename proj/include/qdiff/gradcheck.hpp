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
#include <functional>
#include <string>

#include "qdiff/error.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x,
                           double h) {
  require(h > 0.0, ErrorKind::kParameter, "finite difference step must be positive");
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + static_cast<T>(h);
    const double up = f(probe);
    probe[i] = orig - static_cast<T>(h);
    const double down = f(probe);
    probe[i] = orig;
    require(std::isfinite(up) && std::isfinite(down), ErrorKind::kNumeric,
            "non-finite function value at coordinate " + std::to_string(i));
    g[i] = static_cast<T>((up - down) / (2.0 * h));
  }
  return g;
}

// max_i |a_i - b_i| / max(max_i |b_i|, floor)
template <typename T>
double max_relative_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12) {
  require(a.shape() == b.shape(), ErrorKind::kShape, "gradient shape mismatch");
  double num = 0.0, den = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    den = std::max(den, std::abs(static_cast<double>(b[i])));
  }
  return num / den;
}

}  // namespace qdiff
