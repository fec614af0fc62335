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

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "qdiff/calib.hpp"
#include "qdiff/datasets.hpp"
#include "qdiff/error.hpp"
#include "qdiff/quant_model.hpp"
#include "qdiff/schedule.hpp"
#include "qdiff/train.hpp"

namespace qdiff {

// Every run parameter, with its default. N (total calibration samples) is
// derived as calib.n * floor(T_sample / calib.c) and is never an input.
struct RunConfig {
  std::string dataset = "gmm8";
  std::size_t dataset_size = 4096;
  int T_train = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int T_sample = 100;
  double eta = 0.0;
  QuantConfig quant{};
  int calib_c = 5;
  int calib_n = 256;
  CalibStrategy calib_strategy = CalibStrategy::kUniform;
  int calib_iters = 5000;
  std::size_t calib_batch = 64;
  double calib_lambda = 0.01;
  int act_iters = 2000;
  std::uint64_t seed = 0;
  int train_steps = 20000;
  std::size_t train_batch = 512;
  double train_lr = 1e-3;
  std::size_t samples = 1024;
  std::size_t mse_batch = 64;
  std::size_t profile_batch = 1000;

  std::size_t calib_total() const {
    return calib_c >= 1 ? expected_calibration_size(T_sample, calib_c, calib_n) : 0;
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  require(ec == std::errc{} && ptr == end && !value.empty(), ErrorKind::kConfig,
          "invalid value '" + value + "' for key '" + key + "'");
  return out;
}

template <typename N>
std::string render_number(N v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail(ErrorKind::kConfig, "invalid value '" + value + "' for key '" + key + "' (true|false)");
}

inline LayerOverride parse_override(const std::string& key, const std::string& value) {
  if (value == "exempt") return {true, 0};
  const int bits = parse_number<int>(key, value);
  check_bits(bits, key);
  return {false, bits};
}

inline std::string render_override(const LayerOverride& ov) {
  return ov.exempt ? std::string("exempt") : std::to_string(ov.bits);
}

struct ConfigKey {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename N>
ConfigKey number_key(std::string key, N RunConfig::*field) {
  return {key, [field](const RunConfig& c) { return render_number(c.*field); },
          [key, field](RunConfig& c, const std::string& v) { c.*field = parse_number<N>(key, v); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"dataset", [](const RunConfig& c) { return c.dataset; },
       [](RunConfig& c, const std::string& v) {
         require(v == "gmm8" || v == "swissroll", ErrorKind::kConfig,
                 "invalid value '" + v + "' for key 'dataset' (gmm8|swissroll)");
         c.dataset = v;
       }},
      number_key("dataset_size", &RunConfig::dataset_size),
      number_key("T_train", &RunConfig::T_train),
      number_key("beta_start", &RunConfig::beta_start),
      number_key("beta_end", &RunConfig::beta_end),
      number_key("T_sample", &RunConfig::T_sample),
      number_key("eta", &RunConfig::eta),
      {"bits_w", [](const RunConfig& c) { return std::to_string(c.quant.bits_w); },
       [](RunConfig& c, const std::string& v) {
         c.quant.bits_w = parse_number<int>("bits_w", v);
         check_bits(c.quant.bits_w, "bits_w");
       }},
      {"bits_a", [](const RunConfig& c) { return std::to_string(c.quant.bits_a); },
       [](RunConfig& c, const std::string& v) {
         c.quant.bits_a = parse_number<int>("bits_a", v);
         check_bits(c.quant.bits_a, "bits_a");
       }},
      {"granularity_w",
       [](const RunConfig& c) {
         return std::string(c.quant.granularity_w == Granularity::kPerChannel ? "per_channel"
                                                                               : "per_tensor");
       },
       [](RunConfig& c, const std::string& v) {
         require(v == "per_channel" || v == "per_tensor", ErrorKind::kConfig,
                 "invalid value '" + v + "' for key 'granularity_w' (per_channel|per_tensor)");
         c.quant.granularity_w = v == "per_channel" ? Granularity::kPerChannel : Granularity::kPerTensor;
       }},
      {"act_quant", [](const RunConfig& c) { return std::string(c.quant.act_quant_enabled ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.quant.act_quant_enabled = parse_bool("act_quant", v); }},
      number_key("calib.c", &RunConfig::calib_c),
      number_key("calib.n", &RunConfig::calib_n),
      {"calib.strategy", [](const RunConfig& c) { return to_string(c.calib_strategy); },
       [](RunConfig& c, const std::string& v) { c.calib_strategy = parse_strategy(v); }},
      number_key("calib.iters", &RunConfig::calib_iters),
      number_key("calib.batch", &RunConfig::calib_batch),
      number_key("calib.lambda", &RunConfig::calib_lambda),
      number_key("calib.act_iters", &RunConfig::act_iters),
      number_key("seed", &RunConfig::seed),
      number_key("train.steps", &RunConfig::train_steps),
      number_key("train.batch", &RunConfig::train_batch),
      number_key("train.lr", &RunConfig::train_lr),
      number_key("samples", &RunConfig::samples),
      number_key("mse_batch", &RunConfig::mse_batch),
      number_key("profile_batch", &RunConfig::profile_batch),
  };
  return keys;
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::kConfig, msg); };
  check(c.dataset_size > 0, "dataset_size must be positive");
  check(c.T_train >= 2, "T_train must be >= 2");
  check(c.beta_start > 0 && c.beta_start <= c.beta_end && c.beta_end < 1,
        "betas must satisfy 0 < beta_start <= beta_end < 1");
  check(c.T_sample >= 2 && c.T_sample <= c.T_train, "T_sample must be in [2, T_train]");
  check(c.eta >= 0, "eta must be >= 0");
  check(c.calib_c >= 1 && c.calib_c <= c.T_sample, "calib.c must be in [1, T_sample]");
  check(c.calib_n >= 1, "calib.n must be >= 1");
  check(c.calib_iters >= 0 && c.act_iters >= 0, "iteration counts must be >= 0");
  check(c.calib_batch > 0 && c.train_batch > 0 && c.samples > 0 && c.mse_batch > 0 &&
            c.profile_batch > 0,
        "batch sizes must be positive");
  check(c.calib_lambda >= 0, "calib.lambda must be >= 0");
  check(c.train_steps >= 0 && c.train_lr > 0, "train.steps >= 0 and train.lr > 0 required");
  check_bits(c.quant.bits_w, "bits_w");
  check_bits(c.quant.bits_a, "bits_a");
}

// One `key=value` per line; `#` starts a comment; blank lines ignored.
// Layer overrides: override.<layer>=exempt|bits, override_act.<layer>=exempt|bits.
inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    require(eq != std::string::npos, ErrorKind::kConfig,
            "line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    require(seen.insert(key).second, ErrorKind::kConfig, "duplicate config key '" + key + "'");
    if (key.starts_with("override_act.")) {
      c.quant.act_overrides[key.substr(13)] = detail::parse_override(key, value);
      continue;
    }
    if (key.starts_with("override.")) {
      c.quant.overrides[key.substr(9)] = detail::parse_override(key, value);
      continue;
    }
    bool known = false;
    for (const auto& k : detail::config_keys()) {
      if (k.key == key) {
        k.set(c, value);
        known = true;
        break;
      }
    }
    require(known, ErrorKind::kConfig, "unknown config key '" + key + "'");
  }
  validate(c);
  return c;
}

inline std::string render_config(const RunConfig& c) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.key + "=" + k.get(c) + "\n";
  for (const auto& [name, ov] : c.quant.overrides) {
    out += "override." + name + "=" + detail::render_override(ov) + "\n";
  }
  for (const auto& [name, ov] : c.quant.act_overrides) {
    out += "override_act." + name + "=" + detail::render_override(ov) + "\n";
  }
  return out;
}

inline NoiseSchedule schedule_of(const RunConfig& c) {
  return make_linear_schedule(c.T_train, c.beta_start, c.beta_end);
}

inline SamplerPlan plan_of(const RunConfig& c, const NoiseSchedule& s) {
  return make_uniform_plan(s, c.T_sample, c.eta);
}

inline DatasetSpec dataset_of(const RunConfig& c) {
  DatasetSpec d;
  d.name = c.dataset;
  d.size = c.dataset_size;
  return d;
}

inline TrainConfig train_config_of(const RunConfig& c) {
  TrainConfig t;
  t.steps = c.train_steps;
  t.batch = c.train_batch;
  t.adam.lr = c.train_lr;
  return t;
}

inline CalibOptions calib_options_of(const RunConfig& c) {
  CalibOptions o;
  o.interval = c.calib_c;
  o.per_step = c.calib_n;
  o.strategy = c.calib_strategy;
  o.weights.iters = c.calib_iters;
  o.weights.batch = c.calib_batch;
  o.weights.lambda = c.calib_lambda;
  o.acts.iters = c.act_iters;
  o.acts.batch = c.calib_batch;
  return o;
}

}  // namespace qdiff
