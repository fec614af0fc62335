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

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "qdiff/analysis.hpp"
#include "qdiff/calib.hpp"
#include "qdiff/config.hpp"
#include "qdiff/csv.hpp"
#include "qdiff/datasets.hpp"
#include "qdiff/io.hpp"
#include "qdiff/quant_model.hpp"
#include "qdiff/sampler.hpp"
#include "qdiff/train.hpp"

namespace qdiff {

// Child streams of Rng(seed) used by the command line pipeline.
namespace streams {
inline constexpr std::uint64_t kDataset = 10;
inline constexpr std::uint64_t kInit = 11;
inline constexpr std::uint64_t kTrain = 12;
inline constexpr std::uint64_t kCalibrate = 20;
inline constexpr std::uint64_t kSample = 30;
inline constexpr std::uint64_t kProfileMse = 40;
inline constexpr std::uint64_t kProfileAct = 41;
inline constexpr std::uint64_t kCompare = 50;
}  // namespace streams

inline Tensor<float> reference_dataset(const RunConfig& cfg) {
  Rng rng = Rng(cfg.seed).split(streams::kDataset);
  return make_dataset(dataset_of(cfg), rng);
}

inline QuantizedModel<float> load_any_model(const std::filesystem::path& path) {
  const TensorList list = load_checkpoint(path);
  if (is_quantized_checkpoint(list)) return quantized_from_tensors(list);
  return bypass_model(model_from_tensors(list));
}

inline NoisePredictor<float> load_fp_model(const std::filesystem::path& path) {
  const TensorList list = load_checkpoint(path);
  require(!is_quantized_checkpoint(list), ErrorKind::kParameter,
          "'" + path.string() + "' is a quantized checkpoint; a full-precision one is required");
  return model_from_tensors(list);
}

namespace detail {

inline std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
};

inline void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config_path, "key=value run configuration")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "overrides the configured seed");
  sub->add_option("--out", o.out_dir, "output directory (created if missing)");
}

inline RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) {
    const auto bytes = read_file(o.config_path);
    cfg = parse_config(std::string(bytes.begin(), bytes.end()));
  }
  if (o.seed) cfg.seed = *o.seed;
  validate(cfg);
  return cfg;
}

inline std::filesystem::path out_path(const CommonOptions& o, const std::string& file) {
  std::error_code ec;
  std::filesystem::create_directories(o.out_dir, ec);
  require(!ec && std::filesystem::is_directory(o.out_dir), ErrorKind::kIo,
          "cannot create output directory '" + o.out_dir + "'");
  return std::filesystem::path(o.out_dir) / file;
}

}  // namespace detail

// Returns the process exit code: 0 on success, 2 for usage errors, 1 for any
// other failure. Failures print exactly one line `error: <kind>: <message>`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Post-training quantization toolkit for small diffusion models", "qdiff"};
  app.require_subcommand(1);
  detail::CommonOptions common;

  auto* train_cmd = app.add_subcommand("train", "train a noise predictor on a toy dataset");
  detail::add_common(train_cmd, common);

  std::string model_path, quant_path, fp_path, samples_path, reference_path, mode = "closed";
  std::optional<int> opt_c, opt_n;
  std::optional<std::string> opt_strategy;
  std::optional<std::size_t> opt_count;
  bool write_trajectory = false;

  auto* calib_cmd = app.add_subcommand("calibrate", "quantize and calibrate a trained model");
  detail::add_common(calib_cmd, common);
  calib_cmd->add_option("--model", model_path, "full-precision checkpoint")->required();
  calib_cmd->add_option("--c", opt_c, "calibration interval");
  calib_cmd->add_option("--n", opt_n, "calibration samples per recorded step");
  calib_cmd->add_option("--strategy", opt_strategy, "none | single_step | uniform");

  auto* sample_cmd = app.add_subcommand("sample", "draw samples from a checkpoint");
  detail::add_common(sample_cmd, common);
  sample_cmd->add_option("--model", model_path, "full-precision or quantized checkpoint")->required();
  sample_cmd->add_option("--count", opt_count, "number of samples");
  sample_cmd->add_flag("--trajectory", write_trajectory, "also write every intermediate state");

  auto* mse_cmd = app.add_subcommand("profile-mse", "per-step error between two checkpoints");
  detail::add_common(mse_cmd, common);
  mse_cmd->add_option("--fp", fp_path, "full-precision checkpoint")->required();
  mse_cmd->add_option("--quantized", quant_path, "checkpoint to compare")->required();
  mse_cmd->add_option("--mode", mode, "closed | open")->check(CLI::IsMember({"closed", "open"}));

  auto* act_cmd = app.add_subcommand("profile-act", "per-step activation ranges");
  detail::add_common(act_cmd, common);
  act_cmd->add_option("--model", model_path, "full-precision checkpoint")->required();

  auto* cmp_cmd = app.add_subcommand("compare-calib", "compare calibration strategies");
  detail::add_common(cmp_cmd, common);
  cmp_cmd->add_option("--model", model_path, "full-precision checkpoint")->required();

  auto* eval_cmd = app.add_subcommand("eval", "sample quality against a reference set");
  detail::add_common(eval_cmd, common);
  eval_cmd->add_option("--samples", samples_path, "sample CSV")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--reference", reference_path,
                       "reference sample CSV (default: the configured dataset)")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << detail::one_line(e.what()) << "\n";
    return 2;
  }

  try {
    const RunConfig cfg = detail::resolve_config(common);
    const Rng root(cfg.seed);
    auto emit = [&](const std::string& file, const std::string& text) {
      const auto path = detail::out_path(common, file);
      write_text_atomic(path, text);
      out << "wrote " << path.string() << "\n";
    };
    auto emit_ckpt = [&](const std::string& file, const TensorList& tensors) {
      const auto path = detail::out_path(common, file);
      save_checkpoint(path, tensors);
      out << "wrote " << path.string() << "\n";
    };
    const NoiseSchedule schedule = schedule_of(cfg);
    const SamplerPlan plan = plan_of(cfg, schedule);

    if (*train_cmd) {
      const Tensor<float> data = reference_dataset(cfg);
      Rng init_rng = root.split(streams::kInit);
      Rng train_rng = root.split(streams::kTrain);
      auto net = NoisePredictor<float>::random(ArchConfig{}, init_rng);
      const auto result = train(std::move(net), data, schedule, train_config_of(cfg), train_rng);
      out << "final loss (mean of last 100 steps): " << moving_average_tail(result.losses) << "\n";
      emit_ckpt("model.qdck", model_tensors(result.model));
      emit("loss.csv", loss_csv(result.losses));
    } else if (*calib_cmd) {
      RunConfig c = cfg;
      if (opt_c) c.calib_c = *opt_c;
      if (opt_n) c.calib_n = *opt_n;
      if (opt_strategy) c.calib_strategy = parse_strategy(*opt_strategy);
      validate(c);
      const NoisePredictor<float> fp = load_fp_model(model_path);
      out << "calibration samples N = " << c.calib_total() << "\n";
      const auto result = qdiffusion_calibrate(fp, schedule, plan, c.quant, calib_options_of(c),
                                               root.split(streams::kCalibrate));
      for (const auto& r : result.weight_reports) {
        out << "weights " << r.block << ": held-out mse " << r.initial_heldout << " -> "
            << r.final_heldout << (r.reverted ? " (kept nearest rounding)" : "") << "\n";
      }
      if (!result.act.warning.empty()) out << "warning: " << result.act.warning << "\n";
      emit_ckpt("quantized.qdck", quantized_tensors(result.model));
      if (result.set.size() > 0) emit_ckpt("calibration.qdck", calibration_tensors(result.set));
    } else if (*sample_cmd) {
      const QuantizedModel<float> qm = load_any_model(model_path);
      const std::size_t count = opt_count.value_or(cfg.samples);
      require(count > 0, ErrorKind::kParameter, "--count must be positive");
      const auto traj = ddim_sample<float>(qm, schedule, plan, count,
                                           static_cast<std::size_t>(qm.base().arch().input_dim),
                                           root.split(streams::kSample), write_trajectory);
      emit("samples.csv", samples_csv(traj.final_sample, std::vector<int>(count, 0)));
      if (write_trajectory) emit("trajectory.csv", trajectory_csv(traj));
    } else if (*mse_cmd) {
      const NoisePredictor<float> fp = load_fp_model(fp_path);
      const QuantizedModel<float> qm = load_any_model(quant_path);
      const auto curve = per_timestep_mse(fp, qm, schedule, plan, cfg.mse_batch,
                                          root.split(streams::kProfileMse),
                                          mode == "open" ? ErrorMode::kOpenLoop : ErrorMode::kClosedLoop);
      emit("error_curve.csv", curve_csv(curve));
    } else if (*act_cmd) {
      const NoisePredictor<float> fp = load_fp_model(model_path);
      const auto profile = activation_profile(fp, schedule, plan, cfg.profile_batch,
                                              root.split(streams::kProfileAct));
      emit("activation_profile.csv", profile_csv(profile));
    } else if (*cmp_cmd) {
      const NoisePredictor<float> fp = load_fp_model(model_path);
      CompareOptions opts;
      opts.calib = calib_options_of(cfg);
      opts.samples = cfg.samples;
      opts.mse_batch = cfg.mse_batch;
      const auto rows = compare_strategies(fp, schedule, plan, cfg.quant, reference_dataset(cfg),
                                           dataset_modes(dataset_of(cfg)), opts,
                                           root.split(streams::kCompare));
      emit("strategies.csv", compare_csv(rows));
    } else if (*eval_cmd) {
      const auto bytes = read_file(samples_path);
      const SampleRows samples = parse_samples_csv(std::string(bytes.begin(), bytes.end()));
      Tensor<float> reference;
      if (reference_path.empty()) {
        reference = reference_dataset(cfg);
      } else {
        const auto ref_bytes = read_file(reference_path);
        reference = parse_samples_csv(std::string(ref_bytes.begin(), ref_bytes.end())).x;
      }
      const QualityReport q = quality_report(samples.x, reference, dataset_modes(dataset_of(cfg)));
      out << "energy distance: " << q.energy_distance << "\n";
      emit("quality.csv", quality_csv(q));
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << to_string(e.kind()) << ": " << detail::one_line(e.what()) << "\n";
    return e.kind() == ErrorKind::kUsage ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << detail::one_line(e.what()) << "\n";
    return 1;
  }
}

}  // namespace qdiff
