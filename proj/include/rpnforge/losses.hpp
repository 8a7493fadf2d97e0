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
#include <span>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

struct LossGrad {
  double loss = 0.0;
  Tensor grad;  // dloss/dinput, same shape as the input
};

// Max-subtracted softmax over a flat span of logits.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

// -log softmax(logits)[target], with the gradient softmax - onehot.
inline LossGrad softmax_cross_entropy(const Tensor& logits, std::size_t target) {
  const std::size_t C = logits.size();
  if (C < 2) fail("softmax_cross_entropy: need at least 2 classes, got ", C);
  if (target >= C) fail("softmax_cross_entropy: target ", target, " out of range [0,", C, ")");
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double sum = 0.0;
  for (std::size_t i = 0; i < C; ++i) sum += std::exp(logits[i] - mx);
  const double log_z = mx + std::log(sum);
  LossGrad out{log_z - logits[target], Tensor(logits.shape())};
  for (std::size_t i = 0; i < C; ++i) out.grad[i] = std::exp(logits[i] - log_z);
  out.grad[target] -= 1.0;
  out.loss = std::max(out.loss, 0.0);
  return out;
}

inline double smooth_l1_scalar(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

inline double smooth_l1_grad_scalar(double d) {
  if (std::abs(d) < 1.0) return d;
  return d > 0.0 ? 1.0 : -1.0;
}

// Sum over components; gradient is with respect to pred.
inline LossGrad smooth_l1(const Tensor& pred, const Tensor& target) {
  pred.require_same_shape(target, "smooth_l1");
  LossGrad out{0.0, Tensor(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    out.loss += smooth_l1_scalar(d);
    out.grad[i] = smooth_l1_grad_scalar(d);
  }
  return out;
}

}  // namespace rpnforge
