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

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

// Per-feature scale/shift and running statistics. The feature axis is the
// last tensor dimension; every other position is a sample of the batch, so
// an [H, W, C] map normalizes each channel over its H*W positions.
struct BatchNormState {
  Param gamma;
  Param beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = 1e-5;
  double momentum = 0.9;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t features, double eps = 1e-5, double mom = 0.9)
      : gamma(Tensor({features}, 1.0)),
        beta(Shape{features}),
        running_mean(Shape{features}),
        running_var(Shape{features}, 1.0),
        epsilon(eps),
        momentum(mom) {}

  std::size_t features() const { return gamma.value.size(); }
};

struct BatchNormCache {
  Tensor xhat;
  std::vector<double> inv_std;
  Mode mode = Mode::Train;
};

inline Tensor batch_norm(const Tensor& batch, BatchNormState& state, Mode mode, BatchNormCache* cache = nullptr) {
  const std::size_t F = state.features();
  if (batch.rank() == 0 || batch.shape().back() != F) {
    fail("batch_norm: input ", shape_string(batch.shape()), " does not end in ", F, " features");
  }
  if (state.epsilon < 0.0) fail("batch_norm: epsilon must be non-negative");
  const std::size_t n = batch.size() / F;
  if (mode == Mode::Train && n < 2) fail("batch_norm: train mode needs at least 2 samples, got ", n);

  std::vector<double> mean(F, 0.0), var(F, 0.0);
  if (mode == Mode::Train) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < F; ++f) mean[f] += batch[i * F + f];
    for (std::size_t f = 0; f < F; ++f) mean[f] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t f = 0; f < F; ++f) {
        const double d = batch[i * F + f] - mean[f];
        var[f] += d * d;
      }
    }
    for (std::size_t f = 0; f < F; ++f) {
      var[f] /= static_cast<double>(n);
      state.running_mean[f] = state.momentum * state.running_mean[f] + (1.0 - state.momentum) * mean[f];
      state.running_var[f] = state.momentum * state.running_var[f] + (1.0 - state.momentum) * var[f];
    }
  } else {
    for (std::size_t f = 0; f < F; ++f) {
      mean[f] = state.running_mean[f];
      var[f] = state.running_var[f];
    }
  }

  std::vector<double> inv_std(F);
  for (std::size_t f = 0; f < F; ++f) {
    const double denom = var[f] + state.epsilon;
    if (!std::isfinite(denom)) fail("batch_norm: non-finite statistics on feature ", f);
    if (!(denom > 0.0)) fail("batch_norm: zero variance with epsilon 0 on feature ", f);
    inv_std[f] = 1.0 / std::sqrt(denom);
  }

  Tensor xhat(batch.shape());
  Tensor y(batch.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < F; ++f) {
      const double h = (batch[i * F + f] - mean[f]) * inv_std[f];
      xhat[i * F + f] = h;
      y[i * F + f] = state.gamma.value[f] * h + state.beta.value[f];
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return y;
}

// Accumulates into gamma/beta gradients and returns dL/dbatch.
inline Tensor batch_norm_backward(const Tensor& grad_out, BatchNormState& state, const BatchNormCache& cache) {
  const std::size_t F = state.features();
  grad_out.require_same_shape(cache.xhat, "batch_norm backward");
  const std::size_t n = grad_out.size() / F;
  std::vector<double> sum_g(F, 0.0), sum_gx(F, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < F; ++f) {
      const double g = grad_out[i * F + f];
      sum_g[f] += g;
      sum_gx[f] += g * cache.xhat[i * F + f];
    }
  }
  for (std::size_t f = 0; f < F; ++f) {
    state.gamma.grad[f] += sum_gx[f];
    state.beta.grad[f] += sum_g[f];
  }

  Tensor gx(grad_out.shape());
  const double nd = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < F; ++f) {
      const double scale = state.gamma.value[f] * cache.inv_std[f];
      const double g = grad_out[i * F + f];
      if (cache.mode == Mode::Train) {
        gx[i * F + f] = scale * (g - sum_g[f] / nd - cache.xhat[i * F + f] * sum_gx[f] / nd);
      } else {
        gx[i * F + f] = scale * g;
      }
    }
  }
  return gx;
}

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t features, double eps = 1e-5, double momentum = 0.9)
      : state(features, eps, momentum) {}

  Tensor forward(const Tensor& x, Mode mode) { return batch_norm(x, state, mode, &cache_); }
  Tensor backward(const Tensor& grad_out) { return batch_norm_backward(grad_out, state, cache_); }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &state.gamma});
    out.push_back({prefix + ".beta", &state.beta});
  }
  void collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) {
    out.push_back({prefix + ".running_mean", &state.running_mean});
    out.push_back({prefix + ".running_var", &state.running_var});
  }

  BatchNormState state;

 private:
  BatchNormCache cache_;
};

}  // namespace rpnforge
