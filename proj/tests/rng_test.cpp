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

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "qdiff/rng.hpp"

namespace qdiff {
namespace {

// Published known-answer vectors for Philox4x32-10.
TEST(Philox, KnownAnswerZero) {
  const PhiloxBlock out = philox4x32_10({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(out, (PhiloxBlock{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
}

TEST(Philox, KnownAnswerOnes) {
  const PhiloxBlock out = philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                                        {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(out, (PhiloxBlock{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
}

TEST(Philox, KnownAnswerPi) {
  const PhiloxBlock out = philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                                        {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(out, (PhiloxBlock{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, FirstWordsFollowTheCounterLayout) {
  Rng rng(0);
  EXPECT_EQ(rng.next_u32(), 0x6627e8d5u);
  EXPECT_EQ(rng.next_u32(), 0xe169c58du);
  EXPECT_EQ(rng.next_u32(), 0xbc57ac4cu);
  EXPECT_EQ(rng.next_u32(), 0x9b00dbd8u);
  const PhiloxBlock second = philox4x32_10({1, 0, 0, 0}, {0, 0});
  EXPECT_EQ(rng.next_u32(), second[0]);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng c(42), d(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(c.normal(), d.normal());
}

TEST(Rng, SplitDoesNotAdvanceParentAndDiffers) {
  Rng parent(7);
  const Rng before = parent;
  Rng child_a = parent.split(0);
  Rng child_b = parent.split(1);
  Rng again = parent.split(0);
  EXPECT_EQ(parent.counter(), before.counter());
  const auto a0 = child_a.next_u64();
  EXPECT_NE(a0, child_b.next_u64());
  EXPECT_EQ(a0, again.next_u64());
  EXPECT_NE(parent.split(0).stream(), parent.stream());
  EXPECT_NE(parent.split(0).split(0).stream(), parent.split(0).stream());
}

TEST(Rng, SplitStreamsAreDistinct) {
  Rng root(3);
  std::set<std::uint64_t> streams;
  for (std::uint64_t i = 0; i < 10000; ++i) streams.insert(root.split(i).stream());
  EXPECT_EQ(streams.size(), 10000u);
}

TEST(Rng, UniformOpenInterval) {
  Rng rng(5);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  EXPECT_GT(lo, 0.0);
  EXPECT_LT(hi, 1.0);
  EXPECT_NEAR(sum / n, 0.5, 0.005);
}

TEST(Rng, UniformBelowCoversRange) {
  Rng rng(11);
  std::array<int, 7> counts{};
  for (int i = 0; i < 70000; ++i) {
    const auto v = rng.uniform_below(7);
    ASSERT_LT(v, 7u);
    ++counts[v];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(Rng, NormalMoments) {
  Rng rng(0);
  const Tensor<double> x = rng_normal<double>(rng, {100000});
  const double mean = std::accumulate(x.values().begin(), x.values().end(), 0.0) / x.size();
  double var = 0.0;
  for (double v : x.values()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size() - 1);
  EXPECT_GT(mean, -0.02);
  EXPECT_LT(mean, 0.02);
  EXPECT_GT(var, 0.97);
  EXPECT_LT(var, 1.03);
}

TEST(Rng, NormalTensorIsReproducible) {
  Rng a(0), b(0);
  const auto x = rng_normal<float>(a, {2});
  const auto y = rng_normal<float>(b, {2});
  EXPECT_EQ(x, y);
  Rng c(0);
  EXPECT_EQ(x[0], static_cast<float>(c.normal()));
  EXPECT_EQ(x[1], static_cast<float>(c.normal()));
}

TEST(Rng, ZeroSizedShapeGivesEmptyTensor) {
  Rng rng(1);
  const auto x = rng_normal<float>(rng, {0, 3});
  EXPECT_TRUE(x.empty());
  EXPECT_EQ(x.shape(), (Shape{0, 3}));
}

TEST(Rng, SeededShuffleIsAPermutationAndReproducible) {
  std::vector<int> a(100), b(100);
  std::iota(a.begin(), a.end(), 0);
  b = a;
  Rng r1(9), r2(9);
  seeded_shuffle(std::span<int>(a), r1);
  seeded_shuffle(std::span<int>(b), r2);
  EXPECT_EQ(a, b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_FALSE(std::is_sorted(a.begin(), a.end()));
}

}  // namespace
}  // namespace qdiff
