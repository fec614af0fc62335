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


#include <gtest/gtest.h>

#include <string>

#include "qdiff/config.hpp"
#include "support.hpp"

namespace qdiff {
namespace {

using testing::error_kind_of;

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
    return e.what();
  }
  ADD_FAILURE() << "expected a config error for:\n" << text;
  return {};
}

TEST(Config, EmptyTextGivesDefaults) {
  const RunConfig c = parse_config("");
  EXPECT_EQ(c, RunConfig{});
  EXPECT_EQ(c.T_train, 1000);
  EXPECT_EQ(c.T_sample, 100);
  EXPECT_EQ(c.calib_c, 5);
  EXPECT_EQ(c.calib_n, 256);
  EXPECT_EQ(c.calib_total(), 5120u);
  EXPECT_EQ(c.quant.bits_w, 4);
  EXPECT_EQ(c.quant.bits_a, 8);
  EXPECT_EQ(c.quant.granularity_w, Granularity::kPerChannel);
}

TEST(Config, RenderParseRoundTrip) {
  RunConfig c;
  c.dataset = "swissroll";
  c.beta_start = 2.5e-4;
  c.beta_end = 0.0123456789;
  c.eta = 0.3;
  c.T_sample = 50;
  c.calib_c = 2;
  c.calib_strategy = CalibStrategy::kSingleStep;
  c.calib_lambda = 0.1;
  c.seed = 0xFFFFFFFFFFFFFFFFull;
  c.quant.bits_w = 8;
  c.quant.bits_a = 32;
  c.quant.act_quant_enabled = false;
  c.quant.granularity_w = Granularity::kPerTensor;
  c.quant.overrides["input_proj"] = {true, 0};
  c.quant.overrides["block2.fc1"] = {false, 6};
  c.quant.act_overrides["output_proj"] = {false, 16};
  c.train_lr = 3e-4;
  const RunConfig back = parse_config(render_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(render_config(back), render_config(c));
  EXPECT_EQ(parse_config(render_config(RunConfig{})), RunConfig{});
}

TEST(Config, CommentsWhitespaceAndBlankLines) {
  const RunConfig c = parse_config(
      "# experiment\n"
      "\n"
      "  bits_w = 8   # weights\n"
      "calib.strategy=none\r\n"
      "seed=42\n");
  EXPECT_EQ(c.quant.bits_w, 8);
  EXPECT_EQ(c.calib_strategy, CalibStrategy::kNone);
  EXPECT_EQ(c.seed, 42u);
}

TEST(Config, UnknownKeyIsNamed) {
  EXPECT_NE(config_error("bits_w=4\nbitz_a=8\n").find("bitz_a"), std::string::npos);
}

TEST(Config, DerivedTotalIsNotAKey) {
  EXPECT_NE(config_error("calib.N=5120\n").find("calib.N"), std::string::npos);
  EXPECT_NE(config_error("N=5120\n").find("'N'"), std::string::npos);
}

TEST(Config, DuplicateKeyIsNamed) {
  EXPECT_NE(config_error("seed=1\nseed=2\n").find("seed"), std::string::npos);
}

TEST(Config, InvalidValuesNameTheKey) {
  EXPECT_NE(config_error("bits_w=four\n").find("bits_w"), std::string::npos);
  EXPECT_NE(config_error("bits_a=1\n").find("bits_a"), std::string::npos);
  EXPECT_NE(config_error("granularity_w=per_row\n").find("granularity_w"), std::string::npos);
  EXPECT_NE(config_error("dataset=mnist\n").find("dataset"), std::string::npos);
  EXPECT_NE(config_error("act_quant=maybe\n").find("act_quant"), std::string::npos);
  EXPECT_NE(config_error("override.block1.fc1=fast\n").find("override.block1.fc1"), std::string::npos);
  config_error("seed=-1\n");
  config_error("eta=0.5x\n");
  config_error("just a line\n");
}

TEST(Config, CrossFieldValidation) {
  config_error("T_sample=20\ncalib.c=21\n");
  config_error("T_train=50\nT_sample=60\n");
  config_error("beta_start=0.1\nbeta_end=0.01\n");
  config_error("train.lr=0\n");
  EXPECT_NO_THROW(parse_config("T_sample=20\ncalib.c=20\n"));
}

TEST(Config, Overrides) {
  const RunConfig c = parse_config(
      "override.input_proj=exempt\n"
      "override.block3.fc2=8\n"
      "override_act.block1.temb=exempt\n");
  EXPECT_EQ(c.quant.overrides.at("input_proj"), (LayerOverride{true, 0}));
  EXPECT_EQ(c.quant.overrides.at("block3.fc2"), (LayerOverride{false, 8}));
  EXPECT_EQ(c.quant.act_overrides.at("block1.temb"), (LayerOverride{true, 0}));
  EXPECT_FALSE(c.quant.weight_bits("input_proj").has_value());
  EXPECT_FALSE(c.quant.act_bits("input_proj").has_value());
  EXPECT_EQ(c.quant.weight_bits("block3.fc2"), 8);
  EXPECT_EQ(c.quant.weight_bits("block1.temb"), 4);
  EXPECT_FALSE(c.quant.act_bits("block1.temb").has_value());
}

TEST(Config, DerivedPipelineSettings) {
  const RunConfig c = parse_config("T_sample=50\ncalib.c=2\ncalib.iters=123\ncalib.act_iters=7\n");
  const NoiseSchedule s = schedule_of(c);
  EXPECT_EQ(s.steps, 1000);
  const SamplerPlan plan = plan_of(c, s);
  EXPECT_EQ(plan.size(), 50u);
  const CalibOptions o = calib_options_of(c);
  EXPECT_EQ(o.interval, 2);
  EXPECT_EQ(o.per_step, 256);
  EXPECT_EQ(o.weights.iters, 123);
  EXPECT_EQ(o.acts.iters, 7);
  EXPECT_EQ(c.calib_total(), 6400u);
  EXPECT_EQ(train_config_of(c).steps, 20000);
  EXPECT_EQ(train_config_of(c).batch, 512u);
  EXPECT_EQ(dataset_of(c).name, "gmm8");
}

}  // namespace
}  // namespace qdiff
