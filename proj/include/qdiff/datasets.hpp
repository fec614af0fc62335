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

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "qdiff/error.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

using Point2 = std::array<double, 2>;

struct DatasetSpec {
  std::string name = "gmm8";  // gmm8 | swissroll
  std::size_t size = 4096;
  double radius = 4.0;
  double mode_std = 0.25;
};

// Mode centres on the circle; empty for datasets without discrete modes.
inline std::vector<Point2> dataset_modes(const DatasetSpec& spec) {
  std::vector<Point2> modes;
  if (spec.name == "gmm8") {
    for (int k = 0; k < 8; ++k) {
      const double a = 2.0 * std::numbers::pi * k / 8.0;
      modes.push_back({spec.radius * std::cos(a), spec.radius * std::sin(a)});
    }
  }
  return modes;
}

// gmm8: mode = uniform_below(8), then two normals scaled by mode_std.
// swissroll: u uniform, theta = 1.5 pi (1 + 2u), point = theta (cos, sin) * radius / (4.5 pi)
// plus mode_std / 2 isotropic noise.
inline Tensor<float> make_dataset(const DatasetSpec& spec, Rng& rng) {
  require(spec.size > 0, ErrorKind::kParameter, "dataset must be nonempty");
  Tensor<float> out({spec.size, 2});
  if (spec.name == "gmm8") {
    const auto modes = dataset_modes(spec);
    for (std::size_t i = 0; i < spec.size; ++i) {
      const Point2& m = modes[rng.uniform_below(8)];
      out(i, 0) = static_cast<float>(m[0] + spec.mode_std * rng.normal());
      out(i, 1) = static_cast<float>(m[1] + spec.mode_std * rng.normal());
    }
  } else if (spec.name == "swissroll") {
    const double scale = spec.radius / (4.5 * std::numbers::pi);
    for (std::size_t i = 0; i < spec.size; ++i) {
      const double theta = 1.5 * std::numbers::pi * (1.0 + 2.0 * rng.uniform());
      out(i, 0) = static_cast<float>(scale * theta * std::cos(theta) + 0.5 * spec.mode_std * rng.normal());
      out(i, 1) = static_cast<float>(scale * theta * std::sin(theta) + 0.5 * spec.mode_std * rng.normal());
    }
  } else {
    fail(ErrorKind::kParameter, "unknown dataset '" + spec.name + "'");
  }
  return out;
}

}  // namespace qdiff
