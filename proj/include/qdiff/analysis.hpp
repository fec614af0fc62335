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
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "qdiff/calib.hpp"
#include "qdiff/datasets.hpp"
#include "qdiff/network.hpp"
#include "qdiff/quant_model.hpp"
#include "qdiff/sampler.hpp"
#include "qdiff/schedule.hpp"

namespace qdiff {

enum class ErrorMode { kOpenLoop, kClosedLoop };

struct StepError {
  int step = 0;  // plan index, noise end first
  int t = 0;
  double mse = 0.0;

  friend bool operator==(const StepError&, const StepError&) = default;
};

struct TimestepErrorCurve {
  ErrorMode mode = ErrorMode::kClosedLoop;
  std::vector<StepError> points;

  std::vector<double> values() const {
    std::vector<double> v;
    for (const auto& p : points) v.push_back(p.mse);
    return v;
  }
};

template <typename T>
void require_same_topology(const NoisePredictor<T>& a, const NoisePredictor<T>& b) {
  bool same = a.num_layers() == b.num_layers() && a.arch().input_dim == b.arch().input_dim &&
              a.num_stages() == b.num_stages();
  for (std::size_t i = 0; same && i < a.num_layers(); ++i) {
    same = a.layers()[i].name == b.layers()[i].name &&
           a.layers()[i].weight.shape() == b.layers()[i].weight.shape();
  }
  require(same, ErrorKind::kParameter, "models do not share a topology");
}

// Open loop: one full-precision trajectory; at every step both models see the
// same state and the squared distance between their noise predictions is
// averaged over the batch. Closed loop: both models sample from the same x_T
// and the state divergence after each update is recorded.
template <typename T>
TimestepErrorCurve per_timestep_mse(const NoisePredictor<T>& fp_model, const QuantizedModel<T>& qm,
                                    const NoiseSchedule& s, const SamplerPlan& plan,
                                    std::size_t batch, const Rng& rng,
                                    ErrorMode mode = ErrorMode::kClosedLoop) {
  require_same_topology(fp_model, qm.base());
  require(batch > 0, ErrorKind::kParameter, "batch must be positive");
  check_plan(plan, s);
  const auto dim = static_cast<std::size_t>(fp_model.arch().input_dim);
  TimestepErrorCurve curve;
  curve.mode = mode;
  Tensor<T> x_fp = initial_noise<T>(rng, batch, dim);
  Tensor<T> x_q = x_fp;
  std::vector<int> tv(batch);
  for (std::size_t j = 0; j < plan.size(); ++j) {
    const int t = plan.steps[j];
    const int prev = j + 1 < plan.size() ? plan.steps[j + 1] : 0;
    std::fill(tv.begin(), tv.end(), t);
    Tensor<T> z;
    if (plan.eta > 0.0 && prev != 0) {
      z = Tensor<T>({batch, dim});
      for (std::size_t i = 0; i < batch; ++i) {
        Rng r = rng.split(i).split(j + 1);
        for (std::size_t d = 0; d < dim; ++d) z(i, d) = static_cast<T>(r.normal());
      }
    }
    const Tensor<T>* zp = z.empty() ? nullptr : &z;
    const Tensor<T> eps_fp = predict_noise(fp_model, x_fp, std::span<const int>(tv));
    double mse = 0.0;
    if (mode == ErrorMode::kOpenLoop) {
      const Tensor<T> eps_q = predict_noise(qm, x_fp, std::span<const int>(tv));
      mse = mean_row_sq_error(eps_fp, eps_q);
      x_fp = ddim_step(s, x_fp, eps_fp, t, prev, plan.eta, zp);
    } else {
      const Tensor<T> eps_q = predict_noise(qm, x_q, std::span<const int>(tv));
      x_fp = ddim_step(s, x_fp, eps_fp, t, prev, plan.eta, zp);
      x_q = ddim_step(s, x_q, eps_q, t, prev, plan.eta, zp);
      mse = mean_row_sq_error(x_fp, x_q);
    }
    require(std::isfinite(mse), ErrorKind::kSampling,
            "non-finite error at step " + std::to_string(j));
    curve.points.push_back({static_cast<int>(j), t, mse});
  }
  return curve;
}

// Average ranks for ties.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorKind::kParameter,
          "correlation needs two equally long series");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(ranks(a), ranks(b));
}

// ---------------------------------------------------------------------------
// Activation ranges.

struct RangeStats {
  double min = 0.0, p1 = 0.0, p99 = 0.0, max = 0.0;

  friend bool operator==(const RangeStats&, const RangeStats&) = default;
};

struct ProfileCell {
  std::string layer;
  int t = 0;
  RangeStats stats;

  friend bool operator==(const ProfileCell&, const ProfileCell&) = default;
};

struct ActivationProfile {
  std::vector<ProfileCell> cells;  // plan order, then layer order

  // Per-layer statistics averaged over all recorded steps.
  std::map<std::string, RangeStats> layer_average() const {
    std::map<std::string, RangeStats> sum;
    std::map<std::string, int> count;
    for (const auto& c : cells) {
      RangeStats& s = sum[c.layer];
      s.min += c.stats.min;
      s.p1 += c.stats.p1;
      s.p99 += c.stats.p99;
      s.max += c.stats.max;
      ++count[c.layer];
    }
    for (auto& [name, s] : sum) {
      const double n = count[name];
      s = {s.min / n, s.p1 / n, s.p99 / n, s.max / n};
    }
    return sum;
  }

  friend bool operator==(const ActivationProfile&, const ActivationProfile&) = default;
};

// Linear interpolation between closest ranks on sorted data, q in [0, 1].
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  require(!sorted.empty(), ErrorKind::kParameter, "quantile of an empty set");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

template <typename T>
RangeStats range_stats(const Tensor<T>& x) {
  std::vector<double> v(x.values().begin(), x.values().end());
  require(!v.empty(), ErrorKind::kParameter, "empty activation tensor");
  std::sort(v.begin(), v.end());
  return {v.front(), quantile_sorted(v, 0.01), quantile_sorted(v, 0.99), v.back()};
}

// Full-precision sampling with every layer's output recorded at each step.
template <typename T>
ActivationProfile activation_profile(const NoisePredictor<T>& model, const NoiseSchedule& s,
                                     const SamplerPlan& plan, std::size_t batch, const Rng& rng) {
  require(batch > 0, ErrorKind::kParameter, "batch must be positive");
  ActivationProfile profile;
  const auto dim = static_cast<std::size_t>(model.arch().input_dim);
  StepObserver<T> observe = [&](std::size_t, int t, const Tensor<T>& x, const Tensor<T>&) {
    std::vector<int> tv(x.rows(), t);
    const ForwardOutput<T> out = model_forward(model, x, std::span<const int>(tv));
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
      profile.cells.push_back({model.layers()[l].name, t, range_stats(out.record[l].output)});
    }
  };
  ddim_sample<T>(model, s, plan, batch, dim, rng, false, observe);
  return profile;
}

// Largest ratio, over layers, between the widest and narrowest (max - min)
// range seen across steps.
inline double max_range_ratio(const ActivationProfile& p) {
  std::map<std::string, std::pair<double, double>> extent;
  for (const auto& c : p.cells) {
    const double w = c.stats.max - c.stats.min;
    auto [it, inserted] = extent.try_emplace(c.layer, w, w);
    if (!inserted) {
      it->second.first = std::min(it->second.first, w);
      it->second.second = std::max(it->second.second, w);
    }
  }
  double best = 1.0;
  for (const auto& [name, mm] : extent) {
    if (mm.first > 0.0) best = std::max(best, mm.second / mm.first);
    else if (mm.second > 0.0) return std::numeric_limits<double>::infinity();
  }
  return best;
}

// ---------------------------------------------------------------------------
// Sample quality.

// 2 E|x - y| - E|x - x'| - E|y - y'| with every pair (self pairs included) in
// each mean, so identical multisets give exactly zero and the value is never
// negative.
template <typename T>
double energy_distance(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rows() > 0 && b.rows() > 0, ErrorKind::kParameter, "point sets must be nonempty");
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(), ErrorKind::kShape,
          "point sets must share a dimension");
  const std::size_t d = a.cols();
  auto mean_dist = [d](const Tensor<T>& x, const Tensor<T>& y) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < y.rows(); ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = static_cast<double>(x(i, k)) - static_cast<double>(y(j, k));
          acc += diff * diff;
        }
        row += std::sqrt(acc);
      }
      total += row;
    }
    return total / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
  };
  const double value = 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
  return std::max(0.0, value);
}

struct QualityReport {
  double energy_distance = 0.0;
  std::vector<double> coverage;  // fraction of samples nearest each mode

  double coverage_min() const {
    return coverage.empty() ? 0.0 : *std::min_element(coverage.begin(), coverage.end());
  }
};

template <typename T>
std::vector<double> mode_coverage(const Tensor<T>& samples, const std::vector<Point2>& modes) {
  std::vector<double> cov(modes.size(), 0.0);
  if (modes.empty() || samples.rows() == 0) return cov;
  require(samples.cols() == 2, ErrorKind::kShape, "mode coverage needs 2-D points");
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < modes.size(); ++m) {
      const double dx = samples(i, 0) - modes[m][0], dy = samples(i, 1) - modes[m][1];
      const double dd = dx * dx + dy * dy;
      if (dd < best_d) {
        best_d = dd;
        best = m;
      }
    }
    cov[best] += 1.0;
  }
  for (double& c : cov) c /= static_cast<double>(samples.rows());
  return cov;
}

template <typename T>
QualityReport quality_report(const Tensor<T>& samples, const Tensor<T>& reference,
                             const std::vector<Point2>& modes) {
  return {energy_distance(samples, reference), mode_coverage(samples, modes)};
}

// ---------------------------------------------------------------------------
// Calibration strategies side by side.

struct CompareOptions {
  CalibOptions calib{};
  std::size_t samples = 1024;
  std::size_t mse_batch = 64;
};

struct StrategyRow {
  std::string strategy;  // fp32 | none | single_step | uniform
  int bits_w = kBypassBits;
  int bits_a = kBypassBits;
  QualityReport quality;
  TimestepErrorCurve curve;

  double final_mse() const { return curve.points.empty() ? 0.0 : curve.points.back().mse; }
};

// Calibration uses rng.split(1) (so every strategy sees the same trajectories),
// sampling rng.split(2) and the closed-loop curve rng.split(3).
template <typename T>
std::vector<StrategyRow> compare_strategies(const NoisePredictor<T>& fp_model,
                                            const NoiseSchedule& s, const SamplerPlan& plan,
                                            const QuantConfig& config, const Tensor<T>& reference,
                                            const std::vector<Point2>& modes,
                                            const CompareOptions& opts, const Rng& rng) {
  const auto dim = static_cast<std::size_t>(fp_model.arch().input_dim);
  const Rng sample_rng = rng.split(2), curve_rng = rng.split(3);
  std::vector<StrategyRow> rows;
  {
    StrategyRow fp;
    fp.strategy = "fp32";
    const Tensor<T> x = ddim_sample<T>(fp_model, s, plan, opts.samples, dim, sample_rng, false).final_sample;
    fp.quality = quality_report(x, reference, modes);
    fp.curve = per_timestep_mse(fp_model, bypass_model(fp_model), s, plan, opts.mse_batch, curve_rng);
    rows.push_back(std::move(fp));
  }
  for (CalibStrategy strategy :
       {CalibStrategy::kNone, CalibStrategy::kSingleStep, CalibStrategy::kUniform}) {
    CalibOptions co = opts.calib;
    co.strategy = strategy;
    const CalibrationResult<T> cal = qdiffusion_calibrate(fp_model, s, plan, config, co, rng.split(1));
    StrategyRow row;
    row.strategy = to_string(strategy);
    row.bits_w = config.bits_w;
    row.bits_a = config.any_act_quant() ? config.bits_a : kBypassBits;
    const Tensor<T> x = ddim_sample<T>(cal.model, s, plan, opts.samples, dim, sample_rng, false).final_sample;
    row.quality = quality_report(x, reference, modes);
    row.curve = per_timestep_mse(fp_model, cal.model, s, plan, opts.mse_batch, curve_rng);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace qdiff
