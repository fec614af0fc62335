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

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdiff/error.hpp"
#include "qdiff/network.hpp"
#include "qdiff/quantizer.hpp"

namespace qdiff {

// Bit widths of 32 mean "bypass": the layer runs at full precision.
inline constexpr int kBypassBits = 32;

struct LayerOverride {
  bool exempt = false;
  int bits = 0;  // 0 keeps the global width

  friend bool operator==(const LayerOverride&, const LayerOverride&) = default;
};

struct QuantConfig {
  int bits_w = 4;
  int bits_a = 8;
  Granularity granularity_w = Granularity::kPerChannel;
  bool act_quant_enabled = true;
  std::map<std::string, LayerOverride> overrides;      // weights (exempt: weights and input)
  std::map<std::string, LayerOverride> act_overrides;  // input activations only

  // Effective weight width of a layer, nullopt when it runs at full precision.
  std::optional<int> weight_bits(const std::string& layer) const {
    int bits = bits_w;
    if (auto it = overrides.find(layer); it != overrides.end()) {
      if (it->second.exempt) return std::nullopt;
      if (it->second.bits != 0) bits = it->second.bits;
    }
    if (bits >= kBypassBits) return std::nullopt;
    return bits;
  }

  std::optional<int> act_bits(const std::string& layer) const {
    if (!act_quant_enabled) return std::nullopt;
    int bits = bits_a;
    if (auto it = overrides.find(layer); it != overrides.end() && it->second.exempt) {
      return std::nullopt;
    }
    if (auto it = act_overrides.find(layer); it != act_overrides.end()) {
      if (it->second.exempt) return std::nullopt;
      if (it->second.bits != 0) bits = it->second.bits;
    }
    if (bits >= kBypassBits) return std::nullopt;
    return bits;
  }

  bool any_act_quant() const { return act_quant_enabled && bits_a < kBypassBits; }

  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

inline void check_bits(int bits, const std::string& what) {
  require((bits >= 2 && bits <= 16) || bits == kBypassBits, ErrorKind::kConfig,
          what + " must be in [2, 16] or 32 (bypass), got " + std::to_string(bits));
}

template <typename T>
void validate(const QuantConfig& cfg, const NoisePredictor<T>& net) {
  check_bits(cfg.bits_w, "bits_w");
  check_bits(cfg.bits_a, "bits_a");
  for (const auto* map : {&cfg.overrides, &cfg.act_overrides}) {
    for (const auto& [name, ov] : *map) {
      require(net.find_layer(name).has_value(), ErrorKind::kConfig,
              "override references unknown layer '" + name + "'");
      if (!ov.exempt) check_bits(ov.bits, "override bits for " + name);
    }
  }
}

// Frozen base network plus per-layer weight and input-activation quantizers.
// Activation quantizers are shared across all timesteps.
template <typename T>
class QuantizedModel {
 public:
  QuantizedModel() = default;

  QuantizedModel(NoisePredictor<T> base, QuantConfig config)
      : base_(std::move(base)), config_(std::move(config)) {
    validate(config_, base_);
    const std::size_t n = base_.num_layers();
    weight_q_.assign(n, std::nullopt);
    act_q_.assign(n, std::nullopt);
    effective_.resize(n);
    for (std::size_t i = 0; i < n; ++i) effective_[i] = base_.layers()[i].weight;
  }

  const NoisePredictor<T>& base() const noexcept { return base_; }
  const QuantConfig& config() const noexcept { return config_; }
  std::size_t num_layers() const noexcept { return base_.num_layers(); }
  const std::string& layer_name(std::size_t i) const { return base_.layers()[i].name; }

  std::optional<int> weight_bits(std::size_t layer) const {
    return config_.weight_bits(layer_name(layer));
  }
  std::optional<int> act_bits(std::size_t layer) const {
    return config_.act_bits(layer_name(layer));
  }

  const std::optional<QuantizerParams<T>>& weight_quantizer(std::size_t layer) const {
    return weight_q_.at(layer);
  }
  const std::optional<QuantizerParams<T>>& act_quantizer(std::size_t layer) const {
    return act_q_.at(layer);
  }

  void set_weight_quantizer(std::size_t layer, QuantizerParams<T> p) {
    require(weight_bits(layer).has_value(), ErrorKind::kState,
            "layer " + layer_name(layer) + " is exempt from weight quantization");
    effective_[layer] = quantize_dequantize(base_.layers()[layer].weight, p);
    weight_q_[layer] = std::move(p);
  }

  void set_act_quantizer(std::size_t layer, QuantizerParams<T> p) {
    require(act_bits(layer).has_value(), ErrorKind::kState,
            "layer " + layer_name(layer) + " is exempt from activation quantization");
    validate(p);
    act_q_[layer] = std::move(p);
  }

  void clear_act_quantizers() { act_q_.assign(num_layers(), std::nullopt); }

  // Min-max or MSE-searched symmetric weight quantizers for every quantized layer.
  void init_weight_quantizers(int mse_candidates = 0) {
    for (std::size_t i = 0; i < num_layers(); ++i) {
      const auto bits = weight_bits(i);
      if (!bits) continue;
      const Tensor<T>& w = base_.layers()[i].weight;
      set_weight_quantizer(i, mse_candidates > 0
                                  ? init_scale_mse(w, *bits, config_.granularity_w, mse_candidates)
                                  : init_scale_minmax(w, *bits, config_.granularity_w));
    }
  }

  bool weights_ready() const {
    for (std::size_t i = 0; i < num_layers(); ++i) {
      if (weight_bits(i) && !weight_q_[i]) return false;
    }
    return true;
  }

  bool acts_ready() const {
    for (std::size_t i = 0; i < num_layers(); ++i) {
      if (act_bits(i) && !act_q_[i]) return false;
    }
    return true;
  }

  const Tensor<T>& effective_weight(std::size_t layer) const { return effective_.at(layer); }

  // Layers without an initialised quantizer fall back to full precision; use
  // quantized_forward for the checked path.
  std::vector<LayerBinding<T>> binding(bool with_acts) const {
    std::vector<LayerBinding<T>> b(num_layers());
    for (std::size_t i = 0; i < b.size(); ++i) {
      b[i].weight = &effective_[i];
      b[i].bias = &base_.layers()[i].bias;
      if (with_acts && act_q_[i]) b[i].act = &*act_q_[i];
    }
    return b;
  }

  void require_ready() const {
    require(weights_ready(), ErrorKind::kState, "weight quantizers are not initialised");
    require(!config_.any_act_quant() || acts_ready(), ErrorKind::kState,
            "activation quantizers are not initialised");
  }

  friend bool operator==(const QuantizedModel& a, const QuantizedModel& b) {
    return a.base_ == b.base_ && a.weight_q_ == b.weight_q_ && a.act_q_ == b.act_q_;
  }

 private:
  NoisePredictor<T> base_;
  QuantConfig config_;
  std::vector<std::optional<QuantizerParams<T>>> weight_q_;
  std::vector<std::optional<QuantizerParams<T>>> act_q_;
  std::vector<Tensor<T>> effective_;
};

// Fake-quantized evaluation: every quantized affine layer uses its
// quantize-dequantized weight and, when enabled, quantizes its input;
// nonlinearities and the time embedding stay in full precision.
template <typename T>
ForwardOutput<T> quantized_forward(const QuantizedModel<T>& qm, const Tensor<T>& x,
                                   std::span<const int> t, GradientTape<T>* tape = nullptr) {
  qm.require_ready();
  const auto binding = qm.binding(qm.config().any_act_quant());
  ForwardOutput<T> out;
  ForwardContext<T> ctx{binding, &out.record, tape};
  out.output = forward(qm.base(), ctx, x, t);
  return out;
}

template <typename T>
Tensor<T> predict_noise(const QuantizedModel<T>& qm, const Tensor<T>& x, std::span<const int> t) {
  qm.require_ready();
  const auto binding = qm.binding(qm.config().any_act_quant());
  ForwardContext<T> ctx{binding};
  return forward(qm.base(), ctx, x, t);
}

// Quantizers bypassed everywhere; evaluates exactly like the base network.
template <typename T>
QuantizedModel<T> bypass_model(const NoisePredictor<T>& net) {
  QuantConfig cfg;
  cfg.bits_w = kBypassBits;
  cfg.bits_a = kBypassBits;
  cfg.act_quant_enabled = false;
  return QuantizedModel<T>(net, cfg);
}

}  // namespace qdiff
