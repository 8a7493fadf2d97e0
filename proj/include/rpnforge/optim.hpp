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
#include <unordered_map>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

struct SgdOptions {
  double lr = 1e-3;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

// Stochastic gradient descent. Plain by default; momentum and weight decay
// are opt-in. Frozen params are skipped but still have their grads cleared.
class Sgd {
 public:
  explicit Sgd(SgdOptions opts = {}) : opts_(opts) {}

  void step(const std::vector<NamedParam>& params) {
    if (!(opts_.lr >= 0.0)) fail("sgd: learning rate must be non-negative");
    // Validate everything first so a bad gradient leaves no param half-updated.
    for (const auto& np : params) {
      if (np.param->frozen) continue;
      if (!np.param->grad.all_finite()) fail("sgd: non-finite gradient in parameter '", np.name, "'");
    }
    for (const auto& np : params) {
      Param& p = *np.param;
      if (!p.frozen && opts_.lr != 0.0) {
        if (opts_.momentum != 0.0) {
          Tensor& v = velocity_[np.name];
          if (v.shape() != p.value.shape()) v = Tensor(p.value.shape());
          for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i] + opts_.weight_decay * p.value[i];
            v[i] = opts_.momentum * v[i] + g;
            p.value[i] -= opts_.lr * v[i];
          }
        } else {
          for (std::size_t i = 0; i < p.value.size(); ++i) {
            p.value[i] -= opts_.lr * (p.grad[i] + opts_.weight_decay * p.value[i]);
          }
        }
      }
      p.zero_grad();
    }
  }

  SgdOptions& options() { return opts_; }
  const SgdOptions& options() const { return opts_; }

 private:
  SgdOptions opts_;
  std::unordered_map<std::string, Tensor> velocity_;
};

// value <- value - lr * grad, then grads zeroed.
inline void sgd_step(const std::vector<NamedParam>& params, double lr) {
  if (!(lr >= 0.0)) fail("sgd_step: learning rate must be non-negative");
  Sgd opt({lr, 0.0, 0.0});
  opt.step(params);
}

}  // namespace rpnforge
