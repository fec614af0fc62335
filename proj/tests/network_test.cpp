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

#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "qdiff/network.hpp"
#include "support.hpp"

namespace qdiff {
namespace {

using testing::random_net;
using testing::tiny_arch;

TEST(Tensor, ShapeMismatchIsAShapeError) {
  try {
    Tensor<float>({2, 2}, std::vector<float>(3));
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShape);
  }
}

TEST(Tensor, RowHelpers) {
  const Tensor<int> t({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(slice_rows(t, 1, 3), (Tensor<int>({2, 2}, {3, 4, 5, 6})));
  const std::vector<std::size_t> idx = {2, 0};
  EXPECT_EQ(gather_rows(t, idx), (Tensor<int>({2, 2}, {5, 6, 1, 2})));
  const auto joined = concat_cols(t, t);
  EXPECT_EQ(joined.shape(), (Shape{3, 4}));
  const auto [a, b] = split_cols(joined, 2);
  EXPECT_EQ(a, t);
  EXPECT_EQ(b, t);
}

TEST(Network, DefaultTopology) {
  const NoisePredictor<float> net;
  ASSERT_EQ(net.blocks().size(), 4u);
  EXPECT_EQ(net.num_stages(), 6u);
  std::vector<std::string> names;
  for (const auto& l : net.layers()) names.push_back(l.name);
  const std::vector<std::string> expected = {
      "input_proj",  "block1.fc1", "block1.temb", "block1.fc2", "block2.fc1",
      "block2.temb", "block2.fc2", "block3.fc1",  "block3.temb", "block3.fc2",
      "block3.shortcut", "block4.fc1", "block4.temb", "block4.fc2", "output_proj"};
  EXPECT_EQ(names, expected);
  EXPECT_EQ(net.layers()[net.blocks()[2].fc1].weight.shape(), (Shape{64, 128}));
  EXPECT_EQ(net.blocks()[2].skip_from, 1);
}

TEST(Network, RejectsBackwardSkip) {
  ArchConfig a;
  a.skips = {{3, 2}};
  EXPECT_THROW(NoisePredictor<float>{a}, Error);
}

TEST(Network, ZeroWeightsGiveOutputBias) {
  NoisePredictor<float> net;
  for (auto& l : net.layers()) {
    for (auto& w : l.weight.values()) w = 0.0f;
    for (auto& b : l.bias.values()) b = 0.5f;
  }
  auto& out_bias = net.layers()[net.output_proj()].bias;
  out_bias[0] = 1.25f;
  out_bias[1] = -3.0f;
  Rng rng(1);
  const auto x = rng_normal<float>(rng, {5, 2});
  const std::vector<int> t = {1, 10, 100, 500, 1000};
  const auto y = predict(net, x, t);
  for (std::size_t r = 0; r < 5; ++r) {
    EXPECT_EQ(y(r, 0), 1.25f);
    EXPECT_EQ(y(r, 1), -3.0f);
  }
}

TEST(Network, ForwardIsDeterministic) {
  Rng rng(4);
  const auto net = NoisePredictor<float>::random(ArchConfig{}, rng);
  const auto x = rng_normal<float>(rng, {16, 2});
  const std::vector<int> t(16, 321);
  const auto a = model_forward(net, x, t);
  const auto b = model_forward(net, x, t);
  EXPECT_EQ(a.output, b.output);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    EXPECT_EQ(a.record[l].output, b.record[l].output);
  }
}

TEST(Network, RowResultsDoNotDependOnBatchSize) {
  Rng rng(8);
  const auto net = NoisePredictor<float>::random(ArchConfig{}, rng);
  const auto x = rng_normal<float>(rng, {7, 2});
  std::vector<int> t = {1, 2, 3, 50, 400, 999, 1000};
  const auto full = predict(net, x, t);
  for (std::size_t r = 0; r < 7; ++r) {
    const std::vector<int> tr = {t[r]};
    const auto single = predict(net, slice_rows(x, r, r + 1), tr);
    EXPECT_EQ(single(0, 0), full(r, 0));
    EXPECT_EQ(single(0, 1), full(r, 1));
  }
}

TEST(Network, ActivationRecordCoversEveryLayer) {
  Rng rng(2);
  const auto net = NoisePredictor<float>::random(ArchConfig{}, rng);
  const auto x = rng_normal<float>(rng, {3, 2});
  const std::vector<int> t = {5, 6, 7};
  const auto out = model_forward(net, x, t);
  ASSERT_EQ(out.record.size(), net.num_layers());
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layers()[l];
    EXPECT_EQ(out.record[l].input.shape(), (Shape{3, layer.in_features()})) << layer.name;
    EXPECT_EQ(out.record[l].output.shape(), (Shape{3, layer.out_features()})) << layer.name;
  }
  EXPECT_EQ(out.record[net.output_proj()].output, out.output);
}

TEST(Network, WidthMismatchIsAShapeError) {
  const NoisePredictor<float> net;
  const Tensor<float> x({2, 3});
  const std::vector<int> t = {1, 1};
  try {
    predict(net, x, t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShape);
  }
}

TEST(Network, NonFiniteOutputNamesTheLayer) {
  Rng rng(3);
  auto net = NoisePredictor<float>::random(ArchConfig{}, rng);
  net.layers()[net.blocks()[1].fc2].weight[0] = std::numeric_limits<float>::infinity();
  const auto x = rng_normal<float>(rng, {2, 2});
  const std::vector<int> t = {10, 20};
  try {
    predict(net, x, t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
    EXPECT_NE(std::string(e.what()).find("block2.fc2"), std::string::npos) << e.what();
  }
}

TEST(Network, DeletingTheSkipChangesTheOutput) {
  Rng rng(5);
  const auto net = NoisePredictor<float>::random(ArchConfig{}, rng);
  const auto x = rng_normal<float>(rng, {4, 2});
  const std::vector<int> t = {1, 100, 500, 1000};
  const auto binding = full_precision_binding(net);
  ForwardContext<float> with{binding};
  ForwardContext<float> without{binding};
  without.zero_skips = true;
  EXPECT_NE(forward(net, with, x, t), forward(net, without, x, t));
}

TEST(Network, TimeEmbeddingLayout) {
  const std::vector<int> t = {0, 3};
  const auto e = time_embedding<double>(t, 4, 10000.0);
  ASSERT_EQ(e.shape(), (Shape{2, 4}));
  EXPECT_EQ(e(0, 0), 0.0);
  EXPECT_EQ(e(0, 2), 1.0);
  EXPECT_NEAR(e(1, 0), std::sin(3.0), 1e-15);
  EXPECT_NEAR(e(1, 1), std::sin(3.0 / 100.0), 1e-15);
  EXPECT_NEAR(e(1, 3), std::cos(3.0 / 100.0), 1e-15);
}

TEST(Network, TimestepsMustBePositive) {
  const NoisePredictor<float> net;
  const Tensor<float> x({1, 2});
  const std::vector<int> t = {0};
  EXPECT_THROW(predict(net, x, t), Error);
}

TEST(Network, CastRoundTrip) {
  const auto net = random_net<float>(tiny_arch(), 1);
  EXPECT_EQ(net.cast<double>().cast<float>(), net);
  EXPECT_LT(net.parameter_count(), 1000u);
}

}  // namespace
}  // namespace qdiff
