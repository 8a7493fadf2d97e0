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

#include <cstddef>
#include <string>
#include <vector>

#include "rpnforge/batch_norm.hpp"
#include "rpnforge/layers.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

enum class BlockVariant {
  Plain,            // conv-bn-relu-conv-bn-relu, no shortcut
  Original,         // relu(F(x) + x) with F = conv-bn-relu-conv-bn
  IdentityMapping,  // x + F(x) with F = bn-relu-conv-bn-relu-conv
};

inline const char* to_string(BlockVariant v) {
  switch (v) {
    case BlockVariant::Plain: return "plain";
    case BlockVariant::Original: return "residual_original";
    case BlockVariant::IdentityMapping: return "residual_identity";
  }
  return "?";
}

// Two 3x3 same-padding convolutions over a C-channel map. All three
// variants own the same parameters, so checkpoints move freely between
// them. Convolutions carry no bias: every one of them feeds a batch norm or
// the shortcut sum.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::size_t channels, BlockVariant variant)
      : conv1(3, channels, channels, {1, 1}, false),
        conv2(3, channels, channels, {1, 1}, false),
        bn1(channels),
        bn2(channels),
        variant_(variant) {}

  template <typename Rng>
  void init(Rng& rng) {
    conv1.init(rng);
    conv2.init(rng);
  }

  Tensor forward(const Tensor& x, Mode mode) {
    switch (variant_) {
      case BlockVariant::IdentityMapping: {
        Tensor h = relu1_.forward(bn1.forward(x, mode));
        h = conv1.forward(h);
        h = relu2_.forward(bn2.forward(h, mode));
        h = conv2.forward(h);
        h.require_same_shape(x, "residual block");
        h += x;
        return h;
      }
      case BlockVariant::Original:
      case BlockVariant::Plain: {
        Tensor h = relu1_.forward(bn1.forward(conv1.forward(x), mode));
        h = bn2.forward(conv2.forward(h), mode);
        if (variant_ == BlockVariant::Original) {
          h.require_same_shape(x, "residual block");
          h += x;
        }
        return relu2_.forward(h);
      }
    }
    return x;
  }

  Tensor backward(const Tensor& grad_out) {
    switch (variant_) {
      case BlockVariant::IdentityMapping: {
        Tensor g = conv2.backward(grad_out);
        g = bn2.backward(relu2_.backward(g));
        g = conv1.backward(g);
        g = bn1.backward(relu1_.backward(g));
        g += grad_out;
        return g;
      }
      case BlockVariant::Original:
      case BlockVariant::Plain: {
        const Tensor gsum = relu2_.backward(grad_out);
        Tensor g = conv2.backward(bn2.backward(gsum));
        g = conv1.backward(bn1.backward(relu1_.backward(g)));
        if (variant_ == BlockVariant::Original) g += gsum;
        return g;
      }
    }
    return grad_out;
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    conv1.collect(out, prefix + ".conv1");
    bn1.collect(out, prefix + ".bn1");
    conv2.collect(out, prefix + ".conv2");
    bn2.collect(out, prefix + ".bn2");
  }
  void collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) {
    bn1.collect_buffers(out, prefix + ".bn1");
    bn2.collect_buffers(out, prefix + ".bn2");
  }

  BlockVariant variant() const { return variant_; }

  Conv2d conv1;
  Conv2d conv2;
  BatchNorm bn1;
  BatchNorm bn2;

 private:
  BlockVariant variant_ = BlockVariant::IdentityMapping;
  ActivationLayer relu1_{Activation::Relu};
  ActivationLayer relu2_{Activation::Relu};
};

}  // namespace rpnforge
