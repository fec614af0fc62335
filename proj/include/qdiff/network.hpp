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
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdiff/error.hpp"
#include "qdiff/quantizer.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/tensor.hpp"

namespace qdiff {

// Concatenates the output of stage `from_stage` (0 = input projection,
// k = residual block k) onto the input of residual block `to_block`.
struct SkipLink {
  int from_stage = 1;
  int to_block = 3;
  friend bool operator==(const SkipLink&, const SkipLink&) = default;
};

struct ArchConfig {
  int input_dim = 2;
  int width = 64;
  int num_blocks = 4;
  int embed_dim = 32;
  double embed_base = 10000.0;
  std::vector<SkipLink> skips{{1, 3}};

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

inline void validate(const ArchConfig& a) {
  require(a.input_dim >= 1 && a.width >= 1 && a.num_blocks >= 0, ErrorKind::kParameter,
          "architecture dimensions must be positive");
  require(a.embed_dim >= 2 && a.embed_dim % 2 == 0, ErrorKind::kParameter,
          "time embedding dimension must be even and >= 2");
  std::vector<bool> taken(static_cast<std::size_t>(a.num_blocks) + 1, false);
  for (const SkipLink& s : a.skips) {
    require(s.to_block >= 2 && s.to_block <= a.num_blocks && s.from_stage >= 0 &&
                s.from_stage <= s.to_block - 2,
            ErrorKind::kParameter,
            "skip link " + std::to_string(s.from_stage) + "->" +
                std::to_string(s.to_block) + " is not a forward long-range link");
    require(!taken[static_cast<std::size_t>(s.to_block)], ErrorKind::kParameter,
            "at most one skip link per block");
    taken[static_cast<std::size_t>(s.to_block)] = true;
  }
}

template <typename T>
struct Affine {
  std::string name;
  Tensor<T> weight;  // (out, in)
  Tensor<T> bias;    // (out)

  std::size_t in_features() const noexcept { return weight.shape()[1]; }
  std::size_t out_features() const noexcept { return weight.shape()[0]; }
};

// Indices into NoisePredictor::layers() for one residual block.
struct BlockLayout {
  std::size_t fc1 = 0;
  std::size_t temb = 0;
  std::size_t fc2 = 0;
  std::optional<std::size_t> shortcut;  // present when the input is widened by a skip
  int skip_from = -1;                   // source stage, -1 if none
  std::size_t in_width = 0;
};

template <typename T>
T silu(T x) noexcept {
  return x / (T{1} + std::exp(-x));
}

template <typename T>
T silu_grad(T x) noexcept {
  const T sg = T{1} / (T{1} + std::exp(-x));
  return sg * (T{1} + x * (T{1} - sg));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = silu(x[i]);
  return out;
}

// Sinusoidal embedding: [sin(t f_k), cos(t f_k)], f_k = base^(-k / half).
template <typename T>
Tensor<T> time_embedding(std::span<const int> t, int dim, double base) {
  const std::size_t half = static_cast<std::size_t>(dim) / 2;
  Tensor<T> out({t.size(), static_cast<std::size_t>(dim)});
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(base) * static_cast<double>(k) / static_cast<double>(half));
    for (std::size_t r = 0; r < t.size(); ++r) {
      const double arg = static_cast<double>(t[r]) * freq;
      out(r, k) = static_cast<T>(std::sin(arg));
      out(r, k + half) = static_cast<T>(std::cos(arg));
    }
  }
  return out;
}

// The toy epsilon-predictor:
//   h0 = input_proj(x)
//   block k: in = [h_{k-1} | h_skip]; z1 = fc1(silu(in)) + temb(emb);
//            h_k = shortcut(in) + fc2(silu(z1))   (identity shortcut if unwidened)
//   eps = output_proj(silu(h_B))
// Stage 0 is the input projection, stages 1..B the blocks, B+1 the output.
template <typename T>
class NoisePredictor {
 public:
  NoisePredictor() : NoisePredictor(ArchConfig{}) {}

  explicit NoisePredictor(ArchConfig arch) : arch_(std::move(arch)) {
    validate(arch_);
    const auto width = static_cast<std::size_t>(arch_.width);
    const auto emb = static_cast<std::size_t>(arch_.embed_dim);
    add_layer("input_proj", static_cast<std::size_t>(arch_.input_dim), width, "input_proj");
    for (int k = 1; k <= arch_.num_blocks; ++k) {
      const std::string tag = "block" + std::to_string(k);
      BlockLayout b;
      b.in_width = width;
      for (const SkipLink& s : arch_.skips) {
        if (s.to_block == k) {
          b.skip_from = s.from_stage;
          b.in_width += width;
        }
      }
      b.fc1 = add_layer(tag + ".fc1", b.in_width, width, tag);
      b.temb = add_layer(tag + ".temb", emb, width, tag);
      b.fc2 = add_layer(tag + ".fc2", width, width, tag);
      if (b.in_width != width) b.shortcut = add_layer(tag + ".shortcut", b.in_width, width, tag);
      blocks_.push_back(b);
    }
    add_layer("output_proj", width, static_cast<std::size_t>(arch_.input_dim), "output_proj");
  }

  // Weights ~ N(0, 1/fan_in), biases zero; layers drawn in topological order.
  static NoisePredictor random(ArchConfig arch, Rng& rng) {
    NoisePredictor net(std::move(arch));
    for (Affine<T>& layer : net.layers_) {
      const double std = 1.0 / std::sqrt(static_cast<double>(layer.in_features()));
      for (T& w : layer.weight.values()) w = static_cast<T>(std * rng.normal());
    }
    return net;
  }

  const ArchConfig& arch() const noexcept { return arch_; }
  std::vector<Affine<T>>& layers() noexcept { return layers_; }
  const std::vector<Affine<T>>& layers() const noexcept { return layers_; }
  const std::vector<BlockLayout>& blocks() const noexcept { return blocks_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t num_stages() const noexcept { return blocks_.size() + 2; }
  std::size_t output_stage() const noexcept { return blocks_.size() + 1; }
  std::size_t input_proj() const noexcept { return 0; }
  std::size_t output_proj() const noexcept { return layers_.size() - 1; }

  // Reconstruction-block label of a layer.
  const std::string& layer_tag(std::size_t layer) const { return tags_.at(layer); }

  // Stage that evaluates a layer.
  std::size_t layer_stage(std::size_t layer) const { return stage_of_.at(layer); }

  std::optional<std::size_t> find_layer(const std::string& name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  template <typename U>
  NoisePredictor<U> cast() const {
    NoisePredictor<U> out(arch_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.layers()[i].weight = layers_[i].weight.template cast<U>();
      out.layers()[i].bias = layers_[i].bias.template cast<U>();
    }
    return out;
  }

  friend bool operator==(const NoisePredictor& a, const NoisePredictor& b) {
    if (!(a.arch_ == b.arch_)) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      if (!(a.layers_[i].weight == b.layers_[i].weight) ||
          !(a.layers_[i].bias == b.layers_[i].bias)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t add_layer(std::string name, std::size_t in, std::size_t out, std::string tag) {
    layers_.push_back(Affine<T>{std::move(name), Tensor<T>({out, in}), Tensor<T>({out})});
    tags_.push_back(std::move(tag));
    // Block layers are added before their BlockLayout is pushed.
    stage_of_.push_back(tags_.back() == "input_proj" ? 0 : blocks_.size() + 1);
    return layers_.size() - 1;
  }

  ArchConfig arch_;
  std::vector<Affine<T>> layers_;
  std::vector<BlockLayout> blocks_;
  std::vector<std::string> tags_;
  std::vector<std::size_t> stage_of_;
};

// What a layer computes with: its (possibly fake-quantized) weight and bias,
// and an optional activation quantizer applied to its input.
template <typename T>
struct LayerBinding {
  const Tensor<T>* weight = nullptr;
  const Tensor<T>* bias = nullptr;
  const QuantizerParams<T>* act = nullptr;
};

template <typename T>
std::vector<LayerBinding<T>> full_precision_binding(const NoisePredictor<T>& net) {
  std::vector<LayerBinding<T>> b(net.num_layers());
  for (std::size_t i = 0; i < b.size(); ++i) {
    b[i].weight = &net.layers()[i].weight;
    b[i].bias = &net.layers()[i].bias;
  }
  return b;
}

// Input fed to and output produced by one affine layer (pre-nonlinearity).
template <typename T>
struct LayerRecord {
  Tensor<T> input;
  Tensor<T> output;
};

// Indexed by layer; layers not evaluated stay empty.
template <typename T>
using ActivationRecord = std::vector<LayerRecord<T>>;

template <typename T>
struct LayerTape {
  Tensor<T> input;    // raw input
  Tensor<T> input_q;  // after activation quantization (empty if none)
  const Tensor<T>* weight = nullptr;
  const QuantizerParams<T>* act = nullptr;
};

// Intermediates recorded by a forward pass; enough for exact reverse mode over
// the stages that were run.
template <typename T>
struct GradientTape {
  std::vector<LayerTape<T>> layers;
  std::vector<Tensor<T>> stage_in;  // block input after concatenation / silu(h_B) for output
  std::vector<Tensor<T>> z1;        // block pre-activation
  Tensor<T> emb;
};

template <typename T>
struct LayerGrad {
  Tensor<T> weight;  // dL/d(effective weight)
  Tensor<T> bias;
  double act_log_s = 0.0;  // dL/dlog(activation scale)
};

template <typename T>
struct ForwardContext {
  std::span<const LayerBinding<T>> binding;
  ActivationRecord<T>* record = nullptr;
  GradientTape<T>* tape = nullptr;
  bool zero_skips = false;  // replace skip sources with zeros (wiring checks)
  // Replaces act_quantize(x, *binding.act) when set; used to evaluate
  // straight-through surrogates in gradient checks.
  std::function<Tensor<T>(std::size_t, const Tensor<T>&)> act_hook{};
};

namespace kernels {

// c[r][n] += sum_k a(r, k) * b[k][n] with a(r, k) = a[r * a_rs + k * a_ks] and
// b row-major (k_dim x n_dim). Every output element is accumulated in
// increasing k, whatever tile it falls in, so a row's result never depends on
// how many rows are processed together.
template <typename T>
void gemm_accumulate(const T* a, std::size_t a_rs, std::size_t a_ks, const T* b, T* c,
                     std::size_t rows, std::size_t k_dim, std::size_t n_dim) {
  constexpr std::size_t kRb = 2, kNb = 16;
  std::size_t r0 = 0;
  for (; r0 + kRb <= rows; r0 += kRb) {
    std::size_t n0 = 0;
    for (; n0 + kNb <= n_dim; n0 += kNb) {
      T acc[kRb][kNb];
      for (std::size_t q = 0; q < kRb; ++q) {
        for (std::size_t j = 0; j < kNb; ++j) acc[q][j] = c[(r0 + q) * n_dim + n0 + j];
      }
      for (std::size_t k = 0; k < k_dim; ++k) {
        const T* __restrict bk = b + k * n_dim + n0;
        for (std::size_t q = 0; q < kRb; ++q) {
          const T av = a[(r0 + q) * a_rs + k * a_ks];
          for (std::size_t j = 0; j < kNb; ++j) acc[q][j] += av * bk[j];
        }
      }
      for (std::size_t q = 0; q < kRb; ++q) {
        for (std::size_t j = 0; j < kNb; ++j) c[(r0 + q) * n_dim + n0 + j] = acc[q][j];
      }
    }
    for (std::size_t q = 0; q < kRb; ++q) {
      for (std::size_t n = n0; n < n_dim; ++n) {
        T acc = c[(r0 + q) * n_dim + n];
        for (std::size_t k = 0; k < k_dim; ++k) acc += a[(r0 + q) * a_rs + k * a_ks] * b[k * n_dim + n];
        c[(r0 + q) * n_dim + n] = acc;
      }
    }
  }
  for (; r0 < rows; ++r0) {
    T* __restrict cr = c + r0 * n_dim;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const T av = a[r0 * a_rs + k * a_ks];
      const T* __restrict bk = b + k * n_dim;
      for (std::size_t n = 0; n < n_dim; ++n) cr[n] += av * bk[n];
    }
  }
}

// y = x W^T + b
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t rows = x.rows(), in = w.shape()[1], out = w.shape()[0];
  std::vector<T> wt(in * out);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = w[o * in + i];
  }
  Tensor<T> y({rows, out});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(b.data(), out, y.data() + r * out);
  gemm_accumulate(x.data(), in, std::size_t{1}, wt.data(), y.data(), rows, in, out);
  return y;
}

// dx = dy W
template <typename T>
Tensor<T> linear_backward_input(const Tensor<T>& dy, const Tensor<T>& w) {
  const std::size_t rows = dy.rows(), in = w.shape()[1], out = w.shape()[0];
  Tensor<T> dx({rows, in});
  gemm_accumulate(dy.data(), out, std::size_t{1}, w.data(), dx.data(), rows, out, in);
  return dx;
}

// dW += dy^T x, db += sum_r dy, accumulated in increasing row order.
template <typename T>
void linear_backward_params(const Tensor<T>& dy, const Tensor<T>& x, Tensor<T>& dw,
                            Tensor<T>& db) {
  const std::size_t rows = dy.rows(), in = x.cols(), out = dy.cols();
  gemm_accumulate(dy.data(), std::size_t{1}, out, x.data(), dw.data(), out, rows, in);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) db[o] += dy[r * out + o];
  }
}

}  // namespace kernels

namespace detail {

template <typename T>
Tensor<T> apply_layer(const NoisePredictor<T>& net, const ForwardContext<T>& ctx,
                      std::size_t layer, const Tensor<T>& x) {
  const Affine<T>& spec = net.layers()[layer];
  const LayerBinding<T>& bind = ctx.binding[layer];
  require(bind.weight != nullptr && bind.bias != nullptr, ErrorKind::kState,
          "layer " + spec.name + " has no bound weights");
  require(x.rank() == 2 && x.cols() == spec.in_features(), ErrorKind::kShape,
          "layer " + spec.name + " expects width " + std::to_string(spec.in_features()) +
              ", got " + shape_string(x.shape()));
  Tensor<T> xq;
  if (bind.act != nullptr) xq = ctx.act_hook ? ctx.act_hook(layer, x) : act_quantize(x, *bind.act);
  const Tensor<T>& used = bind.act != nullptr ? xq : x;
  Tensor<T> y = kernels::linear_forward(used, *bind.weight, *bind.bias);
  require(y.all_finite(), ErrorKind::kNumeric, "non-finite output in layer " + spec.name);
  if (ctx.record != nullptr) (*ctx.record)[layer] = LayerRecord<T>{x, y};
  if (ctx.tape != nullptr) {
    LayerTape<T>& lt = ctx.tape->layers[layer];
    lt.input = x;
    lt.input_q = std::move(xq);
    lt.weight = bind.weight;
    lt.act = bind.act;
  }
  return y;
}

// Returns dL/d(raw input) and accumulates parameter gradients.
template <typename T>
Tensor<T> layer_backward(const GradientTape<T>& tape, std::size_t layer, const Tensor<T>& dy,
                         std::vector<LayerGrad<T>>& grads) {
  const LayerTape<T>& lt = tape.layers[layer];
  require(lt.weight != nullptr, ErrorKind::kState, "layer was not recorded on the tape");
  LayerGrad<T>& g = grads[layer];
  if (g.weight.empty()) {
    g.weight = Tensor<T>(lt.weight->shape());
    g.bias = Tensor<T>({lt.weight->shape()[0]});
  }
  const Tensor<T>& used = lt.act != nullptr ? lt.input_q : lt.input;
  kernels::linear_backward_params(dy, used, g.weight, g.bias);
  Tensor<T> dxq = kernels::linear_backward_input(dy, *lt.weight);
  if (lt.act == nullptr) return dxq;
  Tensor<T> dx(dxq.shape());
  g.act_log_s += act_quant_backward(lt.input, *lt.act, dxq, dx);
  return dx;
}

}  // namespace detail

// Evaluates one stage. `h` holds stage outputs (size num_stages); the stage's
// inputs must already be present and its output is written to h[stage].
template <typename T>
const Tensor<T>& run_stage(const NoisePredictor<T>& net, const ForwardContext<T>& ctx,
                           std::size_t stage, std::vector<Tensor<T>>& h, const Tensor<T>& x,
                           const Tensor<T>& emb) {
  GradientTape<T>* tape = ctx.tape;
  if (stage == 0) {
    h[0] = detail::apply_layer(net, ctx, net.input_proj(), x);
    return h[0];
  }
  if (stage == net.output_stage()) {
    Tensor<T> a = silu(h[stage - 1]);
    if (tape != nullptr) tape->stage_in[stage] = h[stage - 1];
    h[stage] = detail::apply_layer(net, ctx, net.output_proj(), a);
    return h[stage];
  }
  const BlockLayout& b = net.blocks()[stage - 1];
  Tensor<T> in = h[stage - 1];
  if (b.skip_from >= 0) {
    const Tensor<T>& src = h[static_cast<std::size_t>(b.skip_from)];
    in = ctx.zero_skips ? concat_cols(in, Tensor<T>(src.shape())) : concat_cols(in, src);
  }
  Tensor<T> z1 = detail::apply_layer(net, ctx, b.fc1, silu(in));
  add_inplace(z1, detail::apply_layer(net, ctx, b.temb, emb));
  Tensor<T> out = detail::apply_layer(net, ctx, b.fc2, silu(z1));
  if (b.shortcut) {
    add_inplace(out, detail::apply_layer(net, ctx, *b.shortcut, in));
  } else {
    add_inplace(out, in);
  }
  if (tape != nullptr) {
    tape->stage_in[stage] = std::move(in);
    tape->z1[stage] = std::move(z1);
  }
  h[stage] = std::move(out);
  return h[stage];
}

template <typename T>
void reset_tape(GradientTape<T>& tape, const NoisePredictor<T>& net) {
  tape.layers.assign(net.num_layers(), LayerTape<T>{});
  tape.stage_in.assign(net.num_stages(), Tensor<T>{});
  tape.z1.assign(net.num_stages(), Tensor<T>{});
}

inline void check_timesteps(std::span<const int> t, std::size_t rows) {
  require(t.size() == rows, ErrorKind::kShape, "one timestep per input row required");
  for (int v : t) require(v >= 1, ErrorKind::kParameter, "timesteps start at 1");
}

// Full forward pass with an arbitrary binding.
template <typename T>
Tensor<T> forward(const NoisePredictor<T>& net, const ForwardContext<T>& ctx, const Tensor<T>& x,
                  std::span<const int> t) {
  require(x.rank() == 2 && x.cols() == static_cast<std::size_t>(net.arch().input_dim),
          ErrorKind::kShape,
          "model input width " + std::to_string(net.arch().input_dim) + " vs " +
              shape_string(x.shape()));
  check_timesteps(t, x.rows());
  if (ctx.record != nullptr) ctx.record->assign(net.num_layers(), LayerRecord<T>{});
  if (ctx.tape != nullptr) reset_tape(*ctx.tape, net);
  Tensor<T> emb = time_embedding<T>(t, net.arch().embed_dim, net.arch().embed_base);
  std::vector<Tensor<T>> h(net.num_stages());
  for (std::size_t s = 0; s < net.num_stages(); ++s) run_stage(net, ctx, s, h, x, emb);
  if (ctx.tape != nullptr) ctx.tape->emb = std::move(emb);
  return std::move(h.back());
}

template <typename T>
struct ForwardOutput {
  Tensor<T> output;
  ActivationRecord<T> record;
};

// Full-precision evaluation with the activation record; pass a tape to enable
// backward().
template <typename T>
ForwardOutput<T> model_forward(const NoisePredictor<T>& net, const Tensor<T>& x,
                               std::span<const int> t, GradientTape<T>* tape = nullptr) {
  const auto binding = full_precision_binding(net);
  ForwardOutput<T> out;
  ForwardContext<T> ctx{binding, &out.record, tape};
  out.output = forward(net, ctx, x, t);
  return out;
}

template <typename T>
Tensor<T> predict(const NoisePredictor<T>& net, const Tensor<T>& x, std::span<const int> t) {
  const auto binding = full_precision_binding(net);
  ForwardContext<T> ctx{binding};
  return forward(net, ctx, x, t);
}

// Reverse pass through one stage; accumulates into d_h of the stage's inputs.
template <typename T>
void backward_stage(const NoisePredictor<T>& net, const GradientTape<T>& tape, std::size_t stage,
                    const Tensor<T>& d_out, std::vector<Tensor<T>>& d_h,
                    std::vector<LayerGrad<T>>& grads) {
  auto accumulate = [](Tensor<T>& dst, const Tensor<T>& src) {
    if (dst.empty()) {
      dst = src;
    } else {
      add_inplace(dst, src);
    }
  };
  if (stage == 0) {
    detail::layer_backward(tape, net.input_proj(), d_out, grads);
    return;
  }
  if (stage == net.output_stage()) {
    Tensor<T> da = detail::layer_backward(tape, net.output_proj(), d_out, grads);
    const Tensor<T>& pre = tape.stage_in[stage];
    for (std::size_t i = 0; i < da.size(); ++i) da[i] *= silu_grad(pre[i]);
    accumulate(d_h[stage - 1], da);
    return;
  }
  const BlockLayout& b = net.blocks()[stage - 1];
  const Tensor<T>& in = tape.stage_in[stage];
  const Tensor<T>& z1 = tape.z1[stage];
  Tensor<T> d_z1 = detail::layer_backward(tape, b.fc2, d_out, grads);
  for (std::size_t i = 0; i < d_z1.size(); ++i) d_z1[i] *= silu_grad(z1[i]);
  detail::layer_backward(tape, b.temb, d_z1, grads);
  Tensor<T> d_in = detail::layer_backward(tape, b.fc1, d_z1, grads);
  for (std::size_t i = 0; i < d_in.size(); ++i) d_in[i] *= silu_grad(in[i]);
  if (b.shortcut) {
    add_inplace(d_in, detail::layer_backward(tape, *b.shortcut, d_out, grads));
  } else {
    add_inplace(d_in, d_out);
  }
  if (b.skip_from >= 0) {
    auto [d_prev, d_skip] = split_cols(d_in, static_cast<std::size_t>(net.arch().width));
    accumulate(d_h[stage - 1], d_prev);
    accumulate(d_h[static_cast<std::size_t>(b.skip_from)], d_skip);
  } else {
    accumulate(d_h[stage - 1], d_in);
  }
}

// Reverse pass over stages last..first_stage given dL/d(output).
template <typename T>
std::vector<LayerGrad<T>> backward(const NoisePredictor<T>& net, const GradientTape<T>& tape,
                                   const Tensor<T>& d_output, std::size_t first_stage = 0) {
  std::vector<LayerGrad<T>> grads(net.num_layers());
  std::vector<Tensor<T>> d_h(net.num_stages());
  d_h.back() = d_output;
  for (std::size_t s = net.num_stages(); s-- > first_stage;) {
    if (d_h[s].empty()) continue;
    backward_stage(net, tape, s, d_h[s], d_h, grads);
  }
  return grads;
}

}  // namespace qdiff
