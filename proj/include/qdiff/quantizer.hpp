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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "qdiff/error.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

enum class Granularity { kPerTensor, kPerChannel };
enum class RoundingMode { kNearest, kAdaRound };

// Rectified sigmoid stretch constants for adaptive rounding.
inline constexpr double kAdaZeta = 1.1;
inline constexpr double kAdaGamma = -0.1;
// |V| after hardening; h(+-kHardV) is exactly 1 / 0 in float and double.
inline constexpr double kHardV = 100.0;

// Uniform affine quantizer. Weight quantizers are symmetric (zero_offset 0),
// per output channel (scale.size() == rows) or per tensor (scale.size() == 1).
// Activation quantizers are per tensor with an unsigned code range and an
// integer zero offset.
template <typename T>
struct QuantizerParams {
  int bits = 8;
  Granularity granularity = Granularity::kPerTensor;
  std::vector<T> scale{T{1}};
  int c_min = -128;
  int c_max = 127;
  int zero_offset = 0;
  RoundingMode mode = RoundingMode::kNearest;
  Tensor<T> v;  // adaptive rounding variables, same shape as the weight
  // floor(w / s) taken once at init_adaround. Keeping the integer grid fixed
  // while s is learned makes w_hat continuous in s.
  Tensor<T> base;

  std::size_t channel_of(std::size_t flat_index, std::size_t cols) const noexcept {
    return granularity == Granularity::kPerChannel ? flat_index / cols : 0;
  }

  friend bool operator==(const QuantizerParams&, const QuantizerParams&) = default;
};

inline std::pair<int, int> symmetric_bounds(int bits) {
  require(bits >= 2 && bits <= 30, ErrorKind::kParameter,
          "bit width must be in [2, 30], got " + std::to_string(bits));
  return {-(1 << (bits - 1)), (1 << (bits - 1)) - 1};
}

inline std::pair<int, int> unsigned_bounds(int bits) {
  require(bits >= 2 && bits <= 30, ErrorKind::kParameter,
          "bit width must be in [2, 30], got " + std::to_string(bits));
  return {0, (1 << bits) - 1};
}

template <typename T>
void validate(const QuantizerParams<T>& p, const Tensor<T>* w = nullptr) {
  require(p.bits >= 2, ErrorKind::kParameter, "bits must be >= 2");
  require(p.c_min < p.c_max, ErrorKind::kParameter, "c_min must be < c_max");
  require(!p.scale.empty(), ErrorKind::kParameter, "quantizer has no scale");
  for (T s : p.scale) {
    require(std::isfinite(s) && s > T{0}, ErrorKind::kParameter,
            "quantizer scale must be positive and finite");
  }
  if (w != nullptr) {
    const std::size_t channels =
        p.granularity == Granularity::kPerChannel ? w->rows() : 1;
    require(p.scale.size() == channels, ErrorKind::kParameter,
            "scale count does not match tensor channels");
    if (p.mode == RoundingMode::kAdaRound) {
      require(p.v.shape() == w->shape() && p.base.shape() == w->shape(), ErrorKind::kParameter,
              "rounding variables must match weight shape");
    }
  }
}

template <typename T>
T sigmoid(T x) noexcept {
  return T{1} / (T{1} + std::exp(-x));
}

// h(V) = clip(sigmoid(V) * (zeta - gamma) + gamma, 0, 1)
template <typename T>
T rectified_sigmoid(T v) noexcept {
  const T stretched = sigmoid(v) * T(kAdaZeta - kAdaGamma) + T(kAdaGamma);
  return std::clamp(stretched, T{0}, T{1});
}

template <typename T>
T rectified_sigmoid_grad(T v) noexcept {
  const T sg = sigmoid(v);
  const T stretched = sg * T(kAdaZeta - kAdaGamma) + T(kAdaGamma);
  if (stretched <= T{0} || stretched >= T{1}) return T{0};
  return sg * (T{1} - sg) * T(kAdaZeta - kAdaGamma);
}

// Integer code before clipping for element i, used by both rounding modes.
template <typename T>
T unclipped_code(const QuantizerParams<T>& p, std::size_t i, T w, T s) noexcept {
  if (p.mode == RoundingMode::kAdaRound) return p.base[i] + rectified_sigmoid(p.v[i]);
  return std::round(w / s + T(p.zero_offset));
}

template <typename T>
Tensor<T> quantize_dequantize(const Tensor<T>& w, const QuantizerParams<T>& p) {
  validate(p, &w);
  Tensor<T> out(w.shape());
  const std::size_t cols = w.cols();
  const T lo = T(p.c_min), hi = T(p.c_max), z = T(p.zero_offset);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const T s = p.scale[p.channel_of(i, cols)];
    const T code = unclipped_code(p, i, w[i], s);
    out[i] = s * (std::clamp(code, lo, hi) - z);
  }
  return out;
}

template <typename T>
double quantization_sq_error(const Tensor<T>& w, const QuantizerParams<T>& p) {
  return squared_distance(w, quantize_dequantize(w, p));
}

namespace detail {

template <typename T>
std::vector<T> channel_absmax(const Tensor<T>& w, Granularity g) {
  const std::size_t channels = g == Granularity::kPerChannel ? w.rows() : 1;
  const std::size_t per = w.size() / std::max<std::size_t>(channels, 1);
  std::vector<T> m(channels, T{0});
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t c = g == Granularity::kPerChannel ? i / per : 0;
    m[c] = std::max(m[c], std::abs(w[i]));
  }
  return m;
}

// Squared error of channel `c` under nearest rounding with scale s.
template <typename T>
double channel_sq_error(const Tensor<T>& w, std::size_t c, std::size_t per, T s,
                        int c_min, int c_max) {
  double acc = 0.0;
  for (std::size_t i = c * per; i < (c + 1) * per; ++i) {
    const T q = s * std::clamp(std::round(w[i] / s), T(c_min), T(c_max));
    const double d = static_cast<double>(w[i]) - static_cast<double>(q);
    acc += d * d;
  }
  return acc;
}

}  // namespace detail

template <typename T>
QuantizerParams<T> make_symmetric(int bits, Granularity g, std::vector<T> scale) {
  QuantizerParams<T> p;
  p.bits = bits;
  p.granularity = g;
  std::tie(p.c_min, p.c_max) = symmetric_bounds(bits);
  p.zero_offset = 0;
  p.scale = std::move(scale);
  return p;
}

// s = max|w| / c_max per channel; an all-zero channel gets s = 1.
template <typename T>
QuantizerParams<T> init_scale_minmax(const Tensor<T>& w, int bits, Granularity g) {
  require(!w.empty(), ErrorKind::kParameter, "cannot initialise a quantizer on an empty tensor");
  const int c_max = symmetric_bounds(bits).second;
  std::vector<T> scale = detail::channel_absmax(w, g);
  for (T& s : scale) s = s > T{0} ? s / T(c_max) : T{1};
  return make_symmetric(bits, g, std::move(scale));
}

// Candidate i scales the min-max step by (1 - i / (2 n)); the first strict
// minimum of the channel's squared error wins.
template <typename T>
QuantizerParams<T> init_scale_mse(const Tensor<T>& w, int bits, Granularity g,
                                  int n_candidates) {
  require(n_candidates >= 1, ErrorKind::kParameter, "n_candidates must be >= 1");
  QuantizerParams<T> p = init_scale_minmax(w, bits, g);
  const std::size_t channels = p.scale.size();
  const std::size_t per = w.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    const T base = p.scale[c];
    T best = base;
    double best_err = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_candidates; ++i) {
      const T s = base * (T{1} - T(i) / T(2 * n_candidates));
      const double err = detail::channel_sq_error(w, c, per, s, p.c_min, p.c_max);
      if (err < best_err) {
        best_err = err;
        best = s;
      }
    }
    p.scale[c] = best;
  }
  return p;
}

// Asymmetric per-tensor activation quantizer covering [min(lo,0), max(hi,0)].
template <typename T>
QuantizerParams<T> init_act_minmax(double lo, double hi, int bits) {
  QuantizerParams<T> p;
  p.bits = bits;
  p.granularity = Granularity::kPerTensor;
  std::tie(p.c_min, p.c_max) = unsigned_bounds(bits);
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  double s = (hi - lo) / p.c_max;
  if (!(s > 0.0) || !std::isfinite(s)) s = 1.0;
  p.scale = {static_cast<T>(s)};
  p.zero_offset = std::clamp(static_cast<int>(std::round(-lo / s)), p.c_min, p.c_max);
  return p;
}

// Switch to adaptive rounding with h(V) equal to the fractional part of w/s.
template <typename T>
void init_adaround(QuantizerParams<T>& p, const Tensor<T>& w) {
  validate(p, &w);
  p.mode = RoundingMode::kAdaRound;
  p.v = Tensor<T>(w.shape());
  p.base = Tensor<T>(w.shape());
  const std::size_t cols = w.cols();
  const T range = T(kAdaZeta - kAdaGamma);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const T x = w[i] / p.scale[p.channel_of(i, cols)];
    p.base[i] = std::floor(x);
    const T frac = x - p.base[i];
    const T sg = (frac - T(kAdaGamma)) / range;
    p.v[i] = std::log(sg / (T{1} - sg));
  }
}

// Collapse soft rounding to h in {0, 1} (threshold h >= 0.5, i.e. V >= 0).
template <typename T>
void harden_rounding(QuantizerParams<T>& p) {
  if (p.mode != RoundingMode::kAdaRound) return;
  for (auto& v : p.v.values()) v = v >= T{0} ? T(kHardV) : T(-kHardV);
}

template <typename T>
double rounding_regularizer(const QuantizerParams<T>& p, double beta) {
  double acc = 0.0;
  for (T v : p.v.values()) {
    const double h = rectified_sigmoid(static_cast<double>(v));
    acc += 1.0 - std::pow(std::abs(2.0 * h - 1.0), beta);
  }
  return acc;
}

// Chain rule from dL/d(w_hat) to the adaptive-rounding state. Adds into
// grad_v (weight shape) and grad_log_s (one entry per scale). With
// w_hat = s * clip(base + h(V)), dw_hat/dlog(s) = w_hat.
template <typename T>
void adaround_backward(const Tensor<T>& w, const QuantizerParams<T>& p,
                       const Tensor<T>& grad_w_hat, Tensor<T>* grad_v,
                       std::vector<T>* grad_log_s) {
  const std::size_t cols = w.cols();
  const T lo = T(p.c_min), hi = T(p.c_max);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t c = p.channel_of(i, cols);
    const T s = p.scale[c];
    const T code = p.base[i] + rectified_sigmoid(p.v[i]);
    const T clipped = std::clamp(code, lo, hi);
    if (grad_v != nullptr && code > lo && code < hi) {
      (*grad_v)[i] += grad_w_hat[i] * s * rectified_sigmoid_grad(p.v[i]);
    }
    if (grad_log_s != nullptr) (*grad_log_s)[c] += grad_w_hat[i] * s * clipped;
  }
}

// Gradient of the rounding regularizer w.r.t. V, scaled by lambda.
template <typename T>
void regularizer_backward(const QuantizerParams<T>& p, double beta, double lambda,
                          Tensor<T>& grad_v) {
  for (std::size_t i = 0; i < p.v.size(); ++i) {
    const double v = static_cast<double>(p.v[i]);
    const double h = rectified_sigmoid(v);
    const double u = 2.0 * h - 1.0;
    if (u == 0.0) continue;
    const double d_h = -beta * std::pow(std::abs(u), beta - 1.0) * (u > 0 ? 2.0 : -2.0);
    grad_v[i] += static_cast<T>(lambda * d_h * rectified_sigmoid_grad(v));
  }
}

// Straight-through activation fake quantization:
//   x_hat = s * (round(clip(x/s + z, c_min, c_max)) - z)
// dx_hat/dx = 1 inside the clip range, 0 outside;
// dx_hat/ds = round(x/s + z) - z - x/s inside, c_{min,max} - z outside.
template <typename T>
T act_fake_quant(T x, T s, int z, int c_min, int c_max) noexcept {
  const T u = x / s + T(z);
  return s * (std::round(std::clamp(u, T(c_min), T(c_max))) - T(z));
}

template <typename T>
Tensor<T> act_quantize(const Tensor<T>& x, const QuantizerParams<T>& p) {
  Tensor<T> out(x.shape());
  const T s = p.scale[0];
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = act_fake_quant(x[i], s, p.zero_offset, p.c_min, p.c_max);
  }
  return out;
}

// Back-propagates dL/dx_hat; writes dL/dx into grad_x and returns dL/dlog(s).
template <typename T>
double act_quant_backward(const Tensor<T>& x, const QuantizerParams<T>& p,
                          const Tensor<T>& grad_x_hat, Tensor<T>& grad_x) {
  const T s = p.scale[0];
  const T z = T(p.zero_offset), lo = T(p.c_min), hi = T(p.c_max);
  double grad_log_s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T u = x[i] / s + z;
    T d_ds;
    if (u < lo) {
      d_ds = lo - z;
      grad_x[i] = T{0};
    } else if (u > hi) {
      d_ds = hi - z;
      grad_x[i] = T{0};
    } else {
      d_ds = std::round(u) - z - x[i] / s;
      grad_x[i] = grad_x_hat[i];
    }
    grad_log_s += static_cast<double>(grad_x_hat[i]) * static_cast<double>(s * d_ds);
  }
  return grad_log_s;
}

}  // namespace qdiff
