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
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "qdiff/error.hpp"
#include "qdiff/network.hpp"
#include "qdiff/optim.hpp"
#include "qdiff/quant_model.hpp"
#include "qdiff/quantizer.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/sampler.hpp"
#include "qdiff/schedule.hpp"

namespace qdiff {

enum class CalibStrategy { kNone, kSingleStep, kUniform };

inline std::string to_string(CalibStrategy s) {
  switch (s) {
    case CalibStrategy::kNone: return "none";
    case CalibStrategy::kSingleStep: return "single_step";
    case CalibStrategy::kUniform: return "uniform";
  }
  return "uniform";
}

inline CalibStrategy parse_strategy(const std::string& s) {
  if (s == "none") return CalibStrategy::kNone;
  if (s == "single_step") return CalibStrategy::kSingleStep;
  if (s == "uniform") return CalibStrategy::kUniform;
  fail(ErrorKind::kConfig, "unknown calibration strategy '" + s + "'");
}

// Child streams of the generator handed to the calibration entry points.
inline constexpr std::uint64_t kShuffleStream = ~std::uint64_t{0};
inline constexpr std::uint64_t kSetStream = 1;
inline constexpr std::uint64_t kWeightStream = 2;
inline constexpr std::uint64_t kActStream = 3;

template <typename T>
struct CalibrationSample {
  Tensor<T> x;  // (1, dim)
  int t = 0;
  int step_index = 0;
};

struct CalibrationMeta {
  int sample_steps = 0;  // T_sample
  int interval = 0;      // c
  int per_step = 0;      // n
  std::size_t total = 0; // N
  std::uint64_t seed = 0;
  CalibStrategy strategy = CalibStrategy::kUniform;

  friend bool operator==(const CalibrationMeta&, const CalibrationMeta&) = default;
};

// Intermediate denoising inputs. step_index counts sampler iterations from the
// data end: the first denoising iteration (t = T_train) has step_index T_sample,
// the last (t = 1) has step_index 1.
template <typename T>
struct CalibrationSet {
  Tensor<T> x;                  // (N, dim)
  std::vector<int> t;           // diffusion timestep fed to the model
  std::vector<int> step_index;  // sampler step index
  Tensor<T> condition;          // unused; reserved for conditional models
  CalibrationMeta meta;

  std::size_t size() const noexcept { return t.size(); }

  CalibrationSample<T> sample(std::size_t i) const {
    return {slice_rows(x, i, i + 1), t.at(i), step_index.at(i)};
  }

  friend bool operator==(const CalibrationSet& a, const CalibrationSet& b) {
    return a.x == b.x && a.t == b.t && a.step_index == b.step_index && a.meta == b.meta;
  }
};

inline std::size_t expected_calibration_size(int sample_steps, int interval, int per_step) {
  return static_cast<std::size_t>(per_step) * static_cast<std::size_t>(sample_steps / interval);
}

// Runs `per_step` independent full-precision trajectories (row i uses
// rng.split(i)) and keeps each trajectory's model input at every sampler
// iteration whose step index is divisible by `interval`. The single-step
// strategy instead draws the same total N from the first iteration only.
// Samples are then shuffled with rng.split(kShuffleStream).
template <typename T, typename Model>
CalibrationSet<T> build_calibration_set(const Model& fp_model, std::size_t dim,
                                        const NoiseSchedule& s, const SamplerPlan& plan,
                                        int interval, int per_step, const Rng& rng,
                                        CalibStrategy strategy = CalibStrategy::kUniform) {
  check_plan(plan, s);
  const int steps = static_cast<int>(plan.size());
  require(interval >= 1 && interval <= steps, ErrorKind::kParameter,
          "calibration interval c=" + std::to_string(interval) + " must be in [1, T_sample=" +
              std::to_string(steps) + "]");
  require(per_step >= 1, ErrorKind::kParameter, "calibration count n must be >= 1");
  CalibrationSet<T> set;
  set.meta = {steps, interval, per_step, expected_calibration_size(steps, interval, per_step),
              rng.seed(), strategy};
  set.x = Tensor<T>({set.meta.total, dim});
  std::size_t row = 0;
  auto append = [&](const Tensor<T>& states, int t, int step_index) {
    for (std::size_t r = 0; r < states.rows(); ++r, ++row) {
      std::copy_n(states.data() + r * dim, dim, set.x.data() + row * dim);
      set.t.push_back(t);
      set.step_index.push_back(step_index);
    }
  };
  if (strategy == CalibStrategy::kSingleStep) {
    append(initial_noise<T>(rng, set.meta.total, dim), plan.steps.front(), steps);
  } else {
    StepObserver<T> keep = [&](std::size_t j, int t, const Tensor<T>& x, const Tensor<T>&) {
      const int step_index = steps - static_cast<int>(j);
      if (step_index % interval == 0) append(x, t, step_index);
    };
    ddim_sample<T>(fp_model, s, plan, static_cast<std::size_t>(per_step), dim, rng, false, keep);
  }
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng = rng.split(kShuffleStream);
  seeded_shuffle(std::span<std::size_t>(order), shuffle_rng);
  CalibrationSet<T> out;
  out.meta = set.meta;
  out.x = gather_rows(set.x, order);
  for (std::size_t i : order) {
    out.t.push_back(set.t[i]);
    out.step_index.push_back(set.step_index[i]);
  }
  return out;
}

struct ReconstructionBlock {
  enum class Kind { kResidual, kSingleLayer };
  Kind kind = Kind::kSingleLayer;
  std::string name;
  std::vector<std::size_t> layers;
  std::size_t stage = 0;  // output captured at this stage (shortcut join for residual blocks)
};

// Residual blocks become one multi-layer block each; the projections are
// calibrated layer by layer. Order is topological.
template <typename T>
std::vector<ReconstructionBlock> partition_blocks(const NoisePredictor<T>& net) {
  std::vector<ReconstructionBlock> blocks;
  blocks.push_back({ReconstructionBlock::Kind::kSingleLayer, "input_proj", {net.input_proj()}, 0});
  for (std::size_t k = 0; k < net.blocks().size(); ++k) {
    const BlockLayout& b = net.blocks()[k];
    ReconstructionBlock rb{ReconstructionBlock::Kind::kResidual, "block" + std::to_string(k + 1),
                           {b.fc1, b.temb, b.fc2}, k + 1};
    if (b.shortcut) rb.layers.push_back(*b.shortcut);
    blocks.push_back(std::move(rb));
  }
  blocks.push_back({ReconstructionBlock::Kind::kSingleLayer, "output_proj", {net.output_proj()},
                    net.output_stage()});
  return blocks;
}

// Everything needed to evaluate one stage on a set of rows.
template <typename T>
struct StageInputs {
  std::vector<Tensor<T>> h;  // stage outputs, only the stage's inputs are filled
  Tensor<T> x;
  Tensor<T> emb;
  std::vector<int> t;

  std::size_t rows() const noexcept { return t.size(); }
};

template <typename T>
std::vector<std::size_t> stage_dependencies(const NoisePredictor<T>& net, std::size_t stage) {
  if (stage == 0) return {};
  if (stage == net.output_stage()) return {stage - 1};
  const int skip = net.blocks()[stage - 1].skip_from;
  if (skip >= 0) return {stage - 1, static_cast<std::size_t>(skip)};
  return {stage - 1};
}

// Runs stages [0, upto) with `binding`.
template <typename T>
StageInputs<T> run_prefix(const NoisePredictor<T>& net, std::span<const LayerBinding<T>> binding,
                          const Tensor<T>& x, std::span<const int> t, std::size_t upto) {
  StageInputs<T> in;
  in.x = x;
  in.t.assign(t.begin(), t.end());
  in.emb = time_embedding<T>(t, net.arch().embed_dim, net.arch().embed_base);
  in.h.assign(net.num_stages(), Tensor<T>{});
  ForwardContext<T> ctx{binding};
  for (std::size_t s = 0; s < upto; ++s) run_stage(net, ctx, s, in.h, in.x, in.emb);
  return in;
}

template <typename T>
StageInputs<T> gather_inputs(const NoisePredictor<T>& net, const StageInputs<T>& all,
                             std::size_t stage, std::span<const std::size_t> rows) {
  StageInputs<T> out;
  out.h.assign(all.h.size(), Tensor<T>{});
  for (std::size_t dep : stage_dependencies(net, stage)) out.h[dep] = gather_rows(all.h[dep], rows);
  out.x = gather_rows(all.x, rows);
  out.emb = gather_rows(all.emb, rows);
  for (std::size_t r : rows) out.t.push_back(all.t[r]);
  return out;
}

template <typename T>
StageInputs<T> slice_inputs(const NoisePredictor<T>& net, const StageInputs<T>& all,
                            std::size_t stage, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return gather_inputs(net, all, stage, rows);
}

template <typename T>
Tensor<T> eval_stage(const NoisePredictor<T>& net, const ForwardContext<T>& ctx, std::size_t stage,
                     const StageInputs<T>& in) {
  std::vector<Tensor<T>> h = in.h;
  return run_stage(net, ctx, stage, h, in.x, in.emb);
}

// ---------------------------------------------------------------------------
// Weight reconstruction with adaptive rounding.

struct ReconstructionOptions {
  int iters = 5000;
  std::size_t batch = 64;
  double lr_v = 1e-3;
  double lr_scale = 4e-5;
  bool learn_scale = true;
  double lambda = 0.01;
  double beta_start = 20.0;
  double beta_end = 2.0;
  double warmup = 0.2;  // fraction of iterations without the rounding regularizer
  double heldout_fraction = 0.1;
  int record_every = 0;  // 0: once per pass over the optimisation split
};

// beta is held at beta_start during warmup and then decays linearly to beta_end.
inline double annealed_beta(const ReconstructionOptions& o, int iter) {
  const double warm = o.warmup * o.iters;
  if (iter < warm) return o.beta_start;
  const double rel = (iter - warm) / std::max(1.0, o.iters - warm);
  return o.beta_end + (o.beta_start - o.beta_end) * std::max(0.0, 1.0 - rel);
}

inline bool regularizer_active(const ReconstructionOptions& o, int iter) {
  return o.lambda > 0.0 && iter >= o.warmup * o.iters;
}

struct BlockReport {
  std::string block;
  double initial_train = 0.0;    // nearest rounding / min-max start
  double final_train = 0.0;
  double initial_heldout = 0.0;
  double final_heldout = 0.0;
  std::vector<double> history;   // reconstruction loss on the optimisation split
  bool reverted = false;         // final state was worse than the start and was discarded
};

template <typename T>
struct WeightGrads {
  std::vector<Tensor<T>> v;
  std::vector<Tensor<T>> log_scale;
};

// E||out_fp - out_q||^2 + lambda * sum(1 - |2h(V) - 1|^beta) for one block.
// `params` are the weight quantizers of `layers` (rounding variables in
// adaptive mode); other layers use `base_binding`.
template <typename T>
double weight_block_objective(const NoisePredictor<T>& net, std::size_t stage,
                              const StageInputs<T>& in, const Tensor<T>& target,
                              const std::vector<LayerBinding<T>>& base_binding,
                              const std::vector<std::size_t>& layers,
                              const std::vector<QuantizerParams<T>>& params, double lambda,
                              double beta, std::type_identity_t<WeightGrads<T>>* grads) {
  std::vector<LayerBinding<T>> binding(base_binding.begin(), base_binding.end());
  std::vector<Tensor<T>> w_hat(layers.size());
  for (std::size_t k = 0; k < layers.size(); ++k) {
    w_hat[k] = quantize_dequantize(net.layers()[layers[k]].weight, params[k]);
    binding[layers[k]].weight = &w_hat[k];
    binding[layers[k]].act = nullptr;
  }
  GradientTape<T> tape;
  reset_tape(tape, net);
  ForwardContext<T> ctx{binding, nullptr, grads != nullptr ? &tape : nullptr};
  std::vector<Tensor<T>> h = in.h;
  const Tensor<T> out = run_stage(net, ctx, stage, h, in.x, in.emb);
  double loss = mean_row_sq_error(out, target);
  bool use_reg = lambda > 0.0;
  if (use_reg) {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (params[k].mode == RoundingMode::kAdaRound) {
        loss += lambda * rounding_regularizer(params[k], beta);
      }
    }
  }
  if (grads == nullptr) return loss;
  require(std::isfinite(loss), ErrorKind::kCalibration, "non-finite reconstruction loss");
  Tensor<T> d(out.shape());
  const T scale = T(2.0 / static_cast<double>(out.rows()));
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = scale * (out[i] - target[i]);
  std::vector<LayerGrad<T>> lg(net.num_layers());
  std::vector<Tensor<T>> d_h(net.num_stages());
  backward_stage(net, tape, stage, d, d_h, lg);
  grads->v.assign(layers.size(), Tensor<T>{});
  grads->log_scale.assign(layers.size(), Tensor<T>{});
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const Tensor<T>& w = net.layers()[layers[k]].weight;
    grads->v[k] = Tensor<T>(w.shape());
    std::vector<T> gs(params[k].scale.size(), T{0});
    if (params[k].mode == RoundingMode::kAdaRound) {
      adaround_backward(w, params[k], lg[layers[k]].weight, &grads->v[k], &gs);
      if (use_reg) regularizer_backward(params[k], beta, lambda, grads->v[k]);
    }
    const std::size_t n = gs.size();
    grads->log_scale[k] = Tensor<T>({n}, std::move(gs));
  }
  return loss;
}

template <typename T>
double stage_mse(const NoisePredictor<T>& net, std::span<const LayerBinding<T>> binding,
                 std::size_t stage, const StageInputs<T>& in, const Tensor<T>& target) {
  ForwardContext<T> ctx{binding};
  return mean_row_sq_error(eval_stage(net, ctx, stage, in), target);
}

template <typename T>
using PrefixObserver =
    std::function<void(const ReconstructionBlock&, const StageInputs<T>&, const QuantizedModel<T>&)>;

namespace detail {

struct Split {
  std::size_t train = 0;
  std::size_t total = 0;
};

inline Split split_rows(std::size_t total, double heldout_fraction) {
  require(total > 0, ErrorKind::kParameter, "calibration set is empty");
  const auto held = static_cast<std::size_t>(std::floor(static_cast<double>(total) * heldout_fraction));
  Split s{total - std::min(held, total - 1), total};
  return s;
}

template <typename T>
struct BlockData {
  StageInputs<T> q_in;  // quantized-prefix inputs, all rows
  Tensor<T> target;     // full-precision block output on full-precision inputs
};

template <typename T>
BlockData<T> prepare_block(const ReconstructionBlock& block, const NoisePredictor<T>& fp,
                           const QuantizedModel<T>& qm, const CalibrationSet<T>& D,
                           bool prefix_acts) {
  const auto fp_binding = full_precision_binding(fp);
  StageInputs<T> fp_in = run_prefix<T>(fp, fp_binding, D.x, D.t, block.stage + 1);
  BlockData<T> data;
  data.target = std::move(fp_in.h[block.stage]);
  const auto q_binding = qm.binding(prefix_acts);
  data.q_in = run_prefix<T>(qm.base(), q_binding, D.x, D.t, block.stage);
  return data;
}

}  // namespace detail

// Sequentially reconstructs one block's weight quantizers. Inputs come from the
// current quantized prefix (weights only, activations at full precision);
// the target is the full-precision block on full-precision inputs.
template <typename T>
BlockReport adaround_reconstruct_block(const ReconstructionBlock& block,
                                       const NoisePredictor<T>& fp_model, QuantizedModel<T>& qm,
                                       const CalibrationSet<T>& D,
                                       const ReconstructionOptions& opts, const Rng& rng,
                                       const PrefixObserver<T>& observer = {}) {
  require(D.size() > 0, ErrorKind::kParameter, "calibration set is empty");
  const NoisePredictor<T>& net = qm.base();
  const detail::Split split = detail::split_rows(D.size(), opts.heldout_fraction);
  detail::BlockData<T> data = detail::prepare_block(block, fp_model, qm, D, false);
  if (observer) observer(block, data.q_in, qm);

  std::vector<std::size_t> layers;
  std::vector<QuantizerParams<T>> start;
  for (std::size_t l : block.layers) {
    if (!qm.weight_bits(l)) continue;
    require(qm.weight_quantizer(l).has_value(), ErrorKind::kState,
            "weight quantizer of " + net.layers()[l].name + " is not initialised");
    layers.push_back(l);
    start.push_back(*qm.weight_quantizer(l));
  }
  const auto base_binding = qm.binding(false);
  const StageInputs<T> train_in = slice_inputs(net, data.q_in, block.stage, 0, split.train);
  const Tensor<T> train_target = slice_rows(data.target, 0, split.train);
  const StageInputs<T> held_in =
      slice_inputs(net, data.q_in, block.stage, split.train, split.total);
  const Tensor<T> held_target = slice_rows(data.target, split.train, split.total);
  const bool has_held = split.train < split.total;

  auto mse_with = [&](const std::vector<QuantizerParams<T>>& params, const StageInputs<T>& in,
                      const Tensor<T>& target) {
    return weight_block_objective(net, block.stage, in, target, base_binding, layers, params, 0.0,
                                  0.0, nullptr);
  };

  BlockReport report;
  report.block = block.name;
  report.initial_train = mse_with(start, train_in, train_target);
  report.initial_heldout = has_held ? mse_with(start, held_in, held_target) : report.initial_train;
  if (layers.empty()) {
    report.final_train = report.initial_train;
    report.final_heldout = report.initial_heldout;
    return report;
  }

  std::vector<QuantizerParams<T>> params = start;
  std::vector<Tensor<T>> log_scale;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    init_adaround(params[k], net.layers()[layers[k]].weight);
    Tensor<T> ls({params[k].scale.size()});
    for (std::size_t c = 0; c < ls.size(); ++c) ls[c] = std::log(params[k].scale[c]);
    log_scale.push_back(std::move(ls));
  }
  std::vector<Tensor<T>*> v_params, s_params;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    v_params.push_back(&params[k].v);
    s_params.push_back(&log_scale[k]);
  }
  Adam<T> adam_v(AdamConfig{opts.lr_v}, v_params);
  Adam<T> adam_s(AdamConfig{opts.lr_scale}, s_params);

  const std::size_t batch = std::min(opts.batch, split.train);
  const int record_every =
      opts.record_every > 0 ? opts.record_every
                            : static_cast<int>((split.train + batch - 1) / batch);
  Rng batch_rng = rng;
  std::vector<std::size_t> idx(batch);
  WeightGrads<T> grads;
  std::vector<const Tensor<T>*> gv(layers.size()), gs(layers.size());
  for (int it = 0; it < opts.iters; ++it) {
    for (auto& i : idx) i = static_cast<std::size_t>(batch_rng.uniform_below(split.train));
    const StageInputs<T> in = gather_inputs(net, data.q_in, block.stage, idx);
    const Tensor<T> target = gather_rows(data.target, idx);
    const bool reg = regularizer_active(opts, it);
    const double loss =
        weight_block_objective(net, block.stage, in, target, base_binding, layers, params,
                               reg ? opts.lambda : 0.0, annealed_beta(opts, it), &grads);
    require(std::isfinite(loss), ErrorKind::kCalibration,
            "non-finite loss while calibrating " + block.name);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      gv[k] = &grads.v[k];
      gs[k] = &grads.log_scale[k];
    }
    adam_v.step(gv);
    if (opts.learn_scale) {
      adam_s.step(gs);
      for (std::size_t k = 0; k < layers.size(); ++k) {
        for (std::size_t c = 0; c < log_scale[k].size(); ++c) {
          params[k].scale[c] = std::exp(log_scale[k][c]);
        }
      }
    }
    if ((it + 1) % record_every == 0 || it + 1 == opts.iters) {
      report.history.push_back(mse_with(params, train_in, train_target));
    }
  }

  for (auto& p : params) harden_rounding(p);
  report.final_train = mse_with(params, train_in, train_target);
  if (!(report.final_train <= report.initial_train)) {
    params = start;
    report.final_train = report.initial_train;
    report.reverted = true;
  }
  for (std::size_t k = 0; k < layers.size(); ++k) qm.set_weight_quantizer(layers[k], params[k]);
  report.final_heldout = has_held ? mse_with(params, held_in, held_target) : report.final_train;
  return report;
}

// ---------------------------------------------------------------------------
// Activation step sizes.

struct ActCalibOptions {
  int iters = 2000;
  std::size_t batch = 64;
  double lr = 1e-3;  // on log(scale)
  double heldout_fraction = 0.1;
  int record_every = 0;
};

template <typename T>
double act_block_objective(const NoisePredictor<T>& net, std::size_t stage,
                           const StageInputs<T>& in, const Tensor<T>& target,
                           const std::vector<LayerBinding<T>>& weight_binding,
                           const std::vector<std::size_t>& layers,
                           const std::vector<QuantizerParams<T>>& params,
                           std::vector<double>* grad_log_s,
                           const std::function<Tensor<T>(std::size_t, const Tensor<T>&)>& hook = {}) {
  std::vector<LayerBinding<T>> binding(weight_binding.begin(), weight_binding.end());
  for (auto& b : binding) b.act = nullptr;
  for (std::size_t k = 0; k < layers.size(); ++k) binding[layers[k]].act = &params[k];
  GradientTape<T> tape;
  reset_tape(tape, net);
  ForwardContext<T> ctx{binding, nullptr, grad_log_s != nullptr ? &tape : nullptr};
  ctx.act_hook = hook;
  std::vector<Tensor<T>> h = in.h;
  const Tensor<T> out = run_stage(net, ctx, stage, h, in.x, in.emb);
  const double loss = mean_row_sq_error(out, target);
  if (grad_log_s == nullptr) return loss;
  require(std::isfinite(loss), ErrorKind::kCalibration, "non-finite activation loss");
  Tensor<T> d(out.shape());
  const T scale = T(2.0 / static_cast<double>(out.rows()));
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = scale * (out[i] - target[i]);
  std::vector<LayerGrad<T>> lg(net.num_layers());
  std::vector<Tensor<T>> d_h(net.num_stages());
  backward_stage(net, tape, stage, d, d_h, lg);
  grad_log_s->assign(layers.size(), 0.0);
  for (std::size_t k = 0; k < layers.size(); ++k) (*grad_log_s)[k] = lg[layers[k]].act_log_s;
  return loss;
}

// Per-layer input ranges of one block (weights quantized, its own inputs not
// quantized) over the given rows, turned into min-max activation quantizers.
template <typename T>
std::vector<QuantizerParams<T>> act_minmax_for_block(const QuantizedModel<T>& qm,
                                                     const ReconstructionBlock& block,
                                                     const StageInputs<T>& in,
                                                     std::span<const std::size_t> layers) {
  const auto binding = qm.binding(false);
  ActivationRecord<T> record(qm.num_layers());
  ForwardContext<T> ctx{binding, &record};
  eval_stage(qm.base(), ctx, block.stage, in);
  std::vector<QuantizerParams<T>> out;
  for (std::size_t l : layers) {
    const Tensor<T>& x = record[l].input;
    double lo = 0.0, hi = 0.0;
    for (T v : x.values()) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
    out.push_back(init_act_minmax<T>(lo, hi, *qm.act_bits(l)));
  }
  return out;
}

struct ActCalibResult {
  std::vector<BlockReport> reports;
  std::string warning;
};

// Initialises every activation quantizer from min/max over D (block by block,
// through the activation-quantized prefix) and, if `learn` is set, refines
// the step sizes by straight-through gradient descent on the block-output MSE.
// Weight quantizers are only read.
template <typename T>
ActCalibResult calibrate_activations(QuantizedModel<T>& qm, const NoisePredictor<T>& fp_model,
                                     const CalibrationSet<T>& D, const ActCalibOptions& opts,
                                     const Rng& rng, bool learn = true) {
  ActCalibResult result;
  if (!qm.config().any_act_quant()) {
    result.warning = "activation quantization is disabled; nothing to calibrate";
    return result;
  }
  require(D.size() > 0, ErrorKind::kParameter, "calibration set is empty");
  const NoisePredictor<T>& net = qm.base();
  const detail::Split split = detail::split_rows(D.size(), opts.heldout_fraction);
  const auto blocks = partition_blocks(net);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const ReconstructionBlock& block = blocks[b];
    std::vector<std::size_t> layers;
    for (std::size_t l : block.layers) {
      if (qm.act_bits(l)) layers.push_back(l);
    }
    if (layers.empty()) continue;
    detail::BlockData<T> data = detail::prepare_block(block, fp_model, qm, D, true);
    const StageInputs<T> train_in = slice_inputs(net, data.q_in, block.stage, 0, split.train);
    const Tensor<T> train_target = slice_rows(data.target, 0, split.train);
    const StageInputs<T> held_in = slice_inputs(net, data.q_in, block.stage, split.train, split.total);
    const Tensor<T> held_target = slice_rows(data.target, split.train, split.total);
    const bool has_held = split.train < split.total;
    const auto weight_binding = qm.binding(false);
    auto mse_with = [&](const std::vector<QuantizerParams<T>>& params, const StageInputs<T>& in,
                        const Tensor<T>& target) {
      return act_block_objective(net, block.stage, in, target, weight_binding, layers, params,
                                 nullptr);
    };

    const std::vector<QuantizerParams<T>> start = act_minmax_for_block(qm, block, train_in, layers);
    std::vector<QuantizerParams<T>> params = start;
    BlockReport report;
    report.block = block.name;
    report.initial_train = mse_with(start, train_in, train_target);
    report.initial_heldout = has_held ? mse_with(start, held_in, held_target) : report.initial_train;

    if (learn && opts.iters > 0) {
      std::vector<Tensor<T>> log_scale;
      std::vector<Tensor<T>*> ptrs;
      for (const auto& p : params) log_scale.push_back(Tensor<T>({1}, std::vector<T>{std::log(p.scale[0])}));
      for (auto& ls : log_scale) ptrs.push_back(&ls);
      Adam<T> adam(AdamConfig{opts.lr}, ptrs);
      const std::size_t batch = std::min(opts.batch, split.train);
      const int record_every = opts.record_every > 0
                                   ? opts.record_every
                                   : static_cast<int>((split.train + batch - 1) / batch);
      Rng batch_rng = rng.split(b);
      std::vector<std::size_t> idx(batch);
      std::vector<double> g;
      std::vector<Tensor<T>> g_t(layers.size(), Tensor<T>({1}));
      std::vector<const Tensor<T>*> g_ptrs;
      for (auto& t : g_t) g_ptrs.push_back(&t);
      for (int it = 0; it < opts.iters; ++it) {
        for (auto& i : idx) i = static_cast<std::size_t>(batch_rng.uniform_below(split.train));
        const StageInputs<T> in = gather_inputs(net, data.q_in, block.stage, idx);
        const Tensor<T> target = gather_rows(data.target, idx);
        const double loss =
            act_block_objective(net, block.stage, in, target, weight_binding, layers, params, &g);
        require(std::isfinite(loss), ErrorKind::kCalibration,
                "non-finite loss while calibrating activations of " + block.name);
        for (std::size_t k = 0; k < layers.size(); ++k) g_t[k][0] = static_cast<T>(g[k]);
        adam.step(g_ptrs);
        for (std::size_t k = 0; k < layers.size(); ++k) params[k].scale[0] = std::exp(log_scale[k][0]);
        if ((it + 1) % record_every == 0 || it + 1 == opts.iters) {
          report.history.push_back(mse_with(params, train_in, train_target));
        }
      }
    }
    report.final_train = mse_with(params, train_in, train_target);
    if (!(report.final_train <= report.initial_train)) {
      params = start;
      report.final_train = report.initial_train;
      report.reverted = true;
    }
    for (std::size_t k = 0; k < layers.size(); ++k) qm.set_act_quantizer(layers[k], params[k]);
    report.final_heldout = has_held ? mse_with(params, held_in, held_target) : report.final_train;
    result.reports.push_back(std::move(report));
  }
  return result;
}

// ---------------------------------------------------------------------------
// End to end.

struct CalibOptions {
  int interval = 5;    // c
  int per_step = 256;  // n
  CalibStrategy strategy = CalibStrategy::kUniform;
  int mse_candidates = 100;
  ReconstructionOptions weights{};
  ActCalibOptions acts{};
};

template <typename T>
struct CalibrationResult {
  QuantizedModel<T> model;
  CalibrationSet<T> set;
  std::vector<BlockReport> weight_reports;
  ActCalibResult act;
};

// 1. build the calibration set, 2. initialise weight quantizers (MSE search),
// 3. reconstruct blocks in topological order, 4. calibrate activation step
// sizes if enabled. The none strategy stops at min-max initialisation.
template <typename T>
CalibrationResult<T> qdiffusion_calibrate(const NoisePredictor<T>& fp_model, const NoiseSchedule& s,
                                          const SamplerPlan& plan, const QuantConfig& config,
                                          const CalibOptions& opts, const Rng& rng,
                                          const PrefixObserver<T>& observer = {}) {
  const auto dim = static_cast<std::size_t>(fp_model.arch().input_dim);
  const CalibStrategy set_strategy =
      opts.strategy == CalibStrategy::kNone ? CalibStrategy::kUniform : opts.strategy;
  CalibrationResult<T> result{QuantizedModel<T>(fp_model, config), {}, {}, {}};
  QuantizedModel<T>& qm = result.model;
  const bool need_set = opts.strategy != CalibStrategy::kNone || config.any_act_quant();
  if (need_set) {
    result.set = build_calibration_set<T>(fp_model, dim, s, plan, opts.interval, opts.per_step,
                                          rng.split(kSetStream), set_strategy);
  }
  if (opts.strategy == CalibStrategy::kNone) {
    qm.init_weight_quantizers(0);
  } else {
    qm.init_weight_quantizers(opts.mse_candidates);
    const auto blocks = partition_blocks(fp_model);
    const Rng weight_rng = rng.split(kWeightStream);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      result.weight_reports.push_back(adaround_reconstruct_block(
          blocks[b], fp_model, qm, result.set, opts.weights, weight_rng.split(b), observer));
    }
  }
  if (config.any_act_quant()) {
    result.act = calibrate_activations(qm, fp_model, result.set, opts.acts, rng.split(kActStream),
                                       opts.strategy != CalibStrategy::kNone);
  }
  qm.require_ready();
  return result;
}

}  // namespace qdiff
