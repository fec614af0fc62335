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
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdiff/error.hpp"

namespace qdiff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor. Rank-2 tensors are (batch, features) throughout
// the network code.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_size(shape_) == data_.size(), ErrorKind::kShape,
            "tensor data length " + std::to_string(data_.size()) +
                " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const noexcept {
    return shape_.size() < 2 ? 1 : data_.size() / std::max<std::size_t>(shape_[0], 1);
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols() + c];
  }

  std::span<T> row(std::size_t r) noexcept {
    return std::span<T>(data_).subspan(r * cols(), cols());
  }
  std::span<const T> row(std::size_t r) const noexcept {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Rows [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  const std::size_t c = t.cols();
  std::vector<T> out(t.data() + begin * c, t.data() + end * c);
  return Tensor<T>({end - begin, c}, std::move(out));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, std::span<const std::size_t> idx) {
  const std::size_t c = t.cols();
  Tensor<T> out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(t.data() + idx[i] * c, c, out.data() + i * c);
  }
  return out;
}

// [a | b] along the feature axis.
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rows() == b.rows(), ErrorKind::kShape, "concat row mismatch");
  const std::size_t ca = a.cols(), cb = b.cols();
  Tensor<T> out({a.rows(), ca + cb});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::copy_n(a.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(b.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_cols(const Tensor<T>& t, std::size_t left) {
  const std::size_t c = t.cols(), right = c - left;
  Tensor<T> a({t.rows(), left}), b({t.rows(), right});
  for (std::size_t r = 0; r < t.rows(); ++r) {
    std::copy_n(t.data() + r * c, left, a.data() + r * left);
    std::copy_n(t.data() + r * c + left, right, b.data() + r * right);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::kShape, "add shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Sum of squared differences, accumulated in double in index order.
template <typename T>
double squared_distance(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::kShape, "distance shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

// Mean over rows of the per-row squared L2 distance.
template <typename T>
double mean_row_sq_error(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() == 0) return 0.0;
  return squared_distance(a, b) / static_cast<double>(a.rows());
}

}  // namespace qdiff
