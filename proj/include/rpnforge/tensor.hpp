// Copyright 2026 The rpnforge Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
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

#include "rpnforge/error.hpp"

namespace rpnforge {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major array of doubles. Feature maps are [H, W, C].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
      fail("tensor of shape ", shape_string(shape_), " needs ", shape_size(shape_), " values, got ",
           values_.size());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  // [H, W, C] accessors.
  double& at(std::size_t h, std::size_t w, std::size_t c) {
    return values_[(h * shape_[1] + w) * shape_[2] + c];
  }
  double at(std::size_t h, std::size_t w, std::size_t c) const {
    return values_[(h * shape_[1] + w) * shape_[2] + c];
  }

  Tensor reshaped(Shape shape) const& {
    Tensor t = *this;
    return std::move(t).reshaped(std::move(shape));
  }
  Tensor reshaped(Shape shape) && {
    if (shape_size(shape) != values_.size()) {
      fail("cannot reshape ", shape_string(shape_), " to ", shape_string(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      fail(what, ": shape mismatch ", shape_string(shape_), " vs ", shape_string(other.shape_));
    }
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

// A trainable tensor and its accumulated gradient.
struct Param {
  Tensor value;
  Tensor grad;
  bool frozen = false;

  Param() = default;
  explicit Param(Tensor v) : value(std::move(v)), grad(value.shape()) {}
  explicit Param(Shape shape) : value(shape), grad(std::move(shape)) {}

  void zero_grad() { grad.fill(0.0); }
};

struct NamedParam {
  std::string name;
  Param* param;
};

// Non-trainable state that still belongs in a checkpoint.
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

enum class Mode { Train, Eval };

}  // namespace rpnforge
