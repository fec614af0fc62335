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

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdiff/error.hpp"
#include "qdiff/network.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff::testing {

// Two residual blocks of width 4 with a skip from the input projection into
// block 2 (so block 2 has a shortcut projection); 194 parameters.
inline ArchConfig tiny_arch() {
  ArchConfig a;
  a.input_dim = 2;
  a.width = 4;
  a.num_blocks = 2;
  a.embed_dim = 4;
  a.skips = {{0, 2}};
  return a;
}

template <typename T>
NoisePredictor<T> random_net(const ArchConfig& arch, std::uint64_t seed, double bias_scale = 0.1) {
  Rng rng(seed);
  NoisePredictor<T> net = NoisePredictor<T>::random(arch, rng);
  Rng brng = rng.split(99);
  for (auto& l : net.layers()) {
    for (auto& b : l.bias.values()) b = static_cast<T>(bias_scale * brng.normal());
  }
  return net;
}

// Predicts a fixed tensor regardless of input (oracle wiring).
template <typename T>
struct FixedNoiseModel {
  Tensor<T> eps;
};

template <typename T>
Tensor<T> predict_noise(const FixedNoiseModel<T>& m, const Tensor<T>& x, std::span<const int>) {
  return m.eps.empty() ? Tensor<T>(x.shape()) : m.eps;
}

// Kind of the qdiff::Error thrown by f, nullopt when it returns normally.
template <typename F>
std::optional<ErrorKind> error_kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace qdiff::testing
