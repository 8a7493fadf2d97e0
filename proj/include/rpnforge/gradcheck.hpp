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
#include <limits>
#include <span>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Central-difference check of a scalar function of `values`, which are
// perturbed in place and restored. Only the listed indices are probed when
// `indices` is non-empty. Returns the max relative error.
inline double finite_difference_check(const std::function<double()>& loss, std::span<double> values,
                                      std::span<const double> analytic, double eps = 1e-5,
                                      std::span<const std::size_t> indices = {}) {
  if (values.size() != analytic.size()) fail("finite_difference_check: gradient size mismatch");
  double worst = 0.0;
  auto probe = [&](std::size_t i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = loss();
    values[i] = saved - eps;
    const double down = loss();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(analytic[i], numeric);
    worst = std::isnan(err) ? std::numeric_limits<double>::infinity() : std::max(worst, err);
  };
  if (indices.empty()) {
    for (std::size_t i = 0; i < values.size(); ++i) probe(i);
  } else {
    for (std::size_t i : indices) probe(i);
  }
  return worst;
}

// Tensor-input form: op maps an input tensor to a scalar.
inline double finite_difference_check(const std::function<double(const Tensor&)>& op, const Tensor& input,
                                      const Tensor& analytic, double eps = 1e-5) {
  input.require_same_shape(analytic, "finite_difference_check");
  Tensor probe = input;
  return finite_difference_check([&] { return op(probe); }, probe.values(), analytic.values(), eps);
}

// Reduces a tensor-valued op to a scalar through a fixed projection r:
// L = sum_i r_i y_i, so dL/dy = r.
inline double project(const Tensor& y, const Tensor& r) {
  y.require_same_shape(r, "projection");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

}  // namespace rpnforge
