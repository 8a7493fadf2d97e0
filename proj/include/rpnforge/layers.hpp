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
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

// ---------------------------------------------------------------------------
// Convolution over [H, W, C] maps with [kh, kw, C, F] filters.

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

inline Shape conv2d_output_shape(const Shape& in, const Shape& filters, ConvGeometry geo) {
  if (in.size() != 3) fail("conv2d: input must be [H,W,C], got ", shape_string(in));
  if (filters.size() != 4) fail("conv2d: filters must be [k,k,C,F], got ", shape_string(filters));
  if (geo.stride < 1) fail("conv2d: stride must be >= 1");
  if (filters[2] != in[2]) {
    fail("conv2d: filter depth ", filters[2], " does not match input channels ", in[2]);
  }
  if (filters[0] > in[0] + 2 * geo.pad) {
    fail("conv2d: kernel height ", filters[0], " exceeds padded input height ", in[0] + 2 * geo.pad);
  }
  if (filters[1] > in[1] + 2 * geo.pad) {
    fail("conv2d: kernel width ", filters[1], " exceeds padded input width ", in[1] + 2 * geo.pad);
  }
  return {(in[0] + 2 * geo.pad - filters[0]) / geo.stride + 1,
          (in[1] + 2 * geo.pad - filters[1]) / geo.stride + 1, filters[3]};
}

// Each output accumulates bias first, then taps in (ky, kx, c) order.
inline Tensor conv2d(const Tensor& input, const Tensor& filters, const Tensor* bias, ConvGeometry geo) {
  const Shape out_shape = conv2d_output_shape(input.shape(), filters.shape(), geo);
  const std::size_t H = input.dim(0), W = input.dim(1), C = input.dim(2);
  const std::size_t KH = filters.dim(0), KW = filters.dim(1), F = filters.dim(3);
  if (bias && (bias->rank() != 1 || bias->dim(0) != F)) {
    fail("conv2d: bias must be [", F, "], got ", shape_string(bias->shape()));
  }
  Tensor out(out_shape);
  const std::size_t OH = out_shape[0], OW = out_shape[1];
  const double* in = input.data();
  const double* wt = filters.data();
  for (std::size_t oy = 0; oy < OH; ++oy) {
    for (std::size_t ox = 0; ox < OW; ++ox) {
      double* o = out.data() + (oy * OW + ox) * F;
      if (bias) {
        for (std::size_t f = 0; f < F; ++f) o[f] = (*bias)[f];
      }
      for (std::size_t ky = 0; ky < KH; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) - static_cast<std::ptrdiff_t>(geo.pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < KW; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) - static_cast<std::ptrdiff_t>(geo.pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* px = in + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C;
          const double* wk = wt + (ky * KW + kx) * C * F;
          for (std::size_t c = 0; c < C; ++c) {
            const double v = px[c];
            const double* wc = wk + c * F;
            for (std::size_t f = 0; f < F; ++f) o[f] += v * wc[f];
          }
        }
      }
    }
  }
  return out;
}

// Returns dL/dinput; accumulates into grad_filters / grad_bias when given.
inline Tensor conv2d_backward(const Tensor& input, const Tensor& filters, const Tensor& grad_out,
                              ConvGeometry geo, Tensor* grad_filters, Tensor* grad_bias) {
  const Shape out_shape = conv2d_output_shape(input.shape(), filters.shape(), geo);
  if (grad_out.shape() != out_shape) {
    fail("conv2d backward: gradient shape ", shape_string(grad_out.shape()), " != output shape ",
         shape_string(out_shape));
  }
  const std::size_t H = input.dim(0), W = input.dim(1), C = input.dim(2);
  const std::size_t KH = filters.dim(0), KW = filters.dim(1), F = filters.dim(3);
  const std::size_t OH = out_shape[0], OW = out_shape[1];
  Tensor grad_in(input.shape());
  const double* in = input.data();
  const double* wt = filters.data();
  double* gw = grad_filters ? grad_filters->data() : nullptr;
  for (std::size_t oy = 0; oy < OH; ++oy) {
    for (std::size_t ox = 0; ox < OW; ++ox) {
      const double* g = grad_out.data() + (oy * OW + ox) * F;
      if (grad_bias) {
        for (std::size_t f = 0; f < F; ++f) (*grad_bias)[f] += g[f];
      }
      for (std::size_t ky = 0; ky < KH; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) - static_cast<std::ptrdiff_t>(geo.pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < KW; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) - static_cast<std::ptrdiff_t>(geo.pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const std::size_t pix = (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C;
          const double* px = in + pix;
          double* gpx = grad_in.data() + pix;
          const std::size_t woff = (ky * KW + kx) * C * F;
          for (std::size_t c = 0; c < C; ++c) {
            const double* wc = wt + woff + c * F;
            double acc = 0.0;
            for (std::size_t f = 0; f < F; ++f) acc += wc[f] * g[f];
            gpx[c] += acc;
            if (gw) {
              double* gwc = gw + woff + c * F;
              const double v = px[c];
              for (std::size_t f = 0; f < F; ++f) gwc[f] += v * g[f];
            }
          }
        }
      }
    }
  }
  return grad_in;
}

// Depth remap D -> D' with spatial size preserved.
inline Tensor conv1x1(const Tensor& input, const Tensor& filters, const Tensor* bias = nullptr) {
  if (filters.rank() != 4 || filters.dim(0) != 1 || filters.dim(1) != 1) {
    fail("conv1x1: filters must be [1,1,D,D'], got ", shape_string(filters.shape()));
  }
  return conv2d(input, filters, bias, {1, 0});
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2.

inline Tensor max_pool2x2(const Tensor& input, std::vector<std::size_t>* argmax = nullptr) {
  if (input.rank() != 3) fail("max_pool2x2: input must be [H,W,C], got ", shape_string(input.shape()));
  const std::size_t H = input.dim(0), W = input.dim(1), C = input.dim(2);
  if (H % 2 != 0 || W % 2 != 0) {
    fail("max_pool2x2: odd input size ", H, "x", W, "; pad to even dimensions first");
  }
  Tensor out({H / 2, W / 2, C});
  if (argmax) argmax->assign(out.size(), 0);
  for (std::size_t oy = 0; oy < H / 2; ++oy) {
    for (std::size_t ox = 0; ox < W / 2; ++ox) {
      for (std::size_t c = 0; c < C; ++c) {
        // Scan order (0,0),(0,1),(1,0),(1,1); the first maximum wins ties.
        std::size_t best = ((2 * oy) * W + 2 * ox) * C + c;
        double best_v = input[best];
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = ((2 * oy + dy) * W + 2 * ox + dx) * C + c;
            if (input[idx] > best_v) {
              best_v = input[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = (oy * (W / 2) + ox) * C + c;
        out[o] = best_v;
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

inline Tensor max_pool2x2_backward(const Tensor& grad_out, const std::vector<std::size_t>& argmax,
                                   const Shape& input_shape) {
  if (grad_out.size() != argmax.size()) fail("max_pool2x2 backward: argmax size mismatch");
  Tensor grad_in(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad_in[argmax[i]] += grad_out[i];
  return grad_in;
}

// ---------------------------------------------------------------------------
// Elementwise activations.

enum class Activation { Sigmoid, Tanh, Relu };

inline double activate(double x, Activation kind) {
  switch (kind) {
    case Activation::Sigmoid:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    case Activation::Tanh:
      return std::tanh(x);
    case Activation::Relu:
      return x > 0.0 ? x : 0.0;
  }
  return x;
}

inline Tensor activation(const Tensor& x, Activation kind) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(x[i], kind);
  return y;
}

// Needs both the input and the forward output; relu'(0) is taken as 0.
inline Tensor activation_backward(const Tensor& x, const Tensor& y, const Tensor& grad_out, Activation kind) {
  grad_out.require_same_shape(x, "activation backward");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = 0.0;
    switch (kind) {
      case Activation::Sigmoid: d = y[i] * (1.0 - y[i]); break;
      case Activation::Tanh: d = 1.0 - y[i] * y[i]; break;
      case Activation::Relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
    }
    g[i] = grad_out[i] * d;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected: y = W^T x + b with W stored [N, M]. Accepts [N] or a
// batch [B, N].

inline Tensor fully_connected(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2) fail("fully_connected: weights must be [N,M], got ", shape_string(weights.shape()));
  const std::size_t N = weights.dim(0), M = weights.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != M) fail("fully_connected: bias must be [", M, "]");
  if (x.rank() == 0 || x.shape().back() != N) {
    fail("fully_connected: input ", shape_string(x.shape()), " does not end in ", N);
  }
  const std::size_t B = x.size() / N;
  Shape out_shape = x.shape();
  out_shape.back() = M;
  Tensor y(out_shape);
  for (std::size_t b = 0; b < B; ++b) {
    double* yr = y.data() + b * M;
    for (std::size_t m = 0; m < M; ++m) yr[m] = bias[m];
    const double* xr = x.data() + b * N;
    for (std::size_t n = 0; n < N; ++n) {
      const double v = xr[n];
      const double* wr = weights.data() + n * M;
      for (std::size_t m = 0; m < M; ++m) yr[m] += v * wr[m];
    }
  }
  return y;
}

inline Tensor fully_connected_backward(const Tensor& x, const Tensor& weights, const Tensor& grad_out,
                                       Tensor* grad_weights, Tensor* grad_bias) {
  const std::size_t N = weights.dim(0), M = weights.dim(1);
  const std::size_t B = x.size() / N;
  if (grad_out.size() != B * M) fail("fully_connected backward: gradient size mismatch");
  Tensor gx(x.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const double* g = grad_out.data() + b * M;
    const double* xr = x.data() + b * N;
    double* gxr = gx.data() + b * N;
    if (grad_bias) {
      for (std::size_t m = 0; m < M; ++m) (*grad_bias)[m] += g[m];
    }
    for (std::size_t n = 0; n < N; ++n) {
      const double* wr = weights.data() + n * M;
      double acc = 0.0;
      for (std::size_t m = 0; m < M; ++m) acc += wr[m] * g[m];
      gxr[n] = acc;
      if (grad_weights) {
        double* gwr = grad_weights->data() + n * M;
        const double v = xr[n];
        for (std::size_t m = 0; m < M; ++m) gwr[m] += v * g[m];
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Inverted dropout: survivors are scaled by 1/(1-p) at train time, eval is
// the identity.

template <typename Rng>
Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng, std::vector<double>* mask = nullptr) {
  if (!(p >= 0.0 && p < 1.0)) fail("dropout: p must be in [0,1), got ", p);
  if (mode == Mode::Eval || p == 0.0) {
    if (mask) mask->assign(x.size(), 1.0);
    return x;
  }
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  Tensor y(x.shape());
  if (mask) mask->resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = keep(rng) ? scale : 0.0;
    if (mask) (*mask)[i] = m;
    y[i] = x[i] * m;
  }
  return y;
}

inline Tensor dropout_backward(const Tensor& grad_out, const std::vector<double>& mask) {
  if (mask.size() != grad_out.size()) fail("dropout backward: mask size mismatch");
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * mask[i];
  return g;
}

// ---------------------------------------------------------------------------
// Initialization.

// Gaussian with variance 2 / fan_in.
template <typename Rng>
void init_fan_in(Tensor& t, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.values()) v = dist(rng);
}

template <typename Rng>
void init_gaussian(Tensor& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
}

// ---------------------------------------------------------------------------
// Stateful layers: each caches what its backward needs from the last forward.

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t kernel, std::size_t in_ch, std::size_t out_ch, ConvGeometry geo, bool with_bias)
      : weight({kernel, kernel, in_ch, out_ch}), geo_(geo), has_bias_(with_bias) {
    if (with_bias) bias = Param(Shape{out_ch});
  }

  template <typename Rng>
  void init(Rng& rng) {
    init_fan_in(weight.value, weight.value.dim(0) * weight.value.dim(1) * weight.value.dim(2), rng);
    if (has_bias_) bias.value.fill(0.0);
  }

  Tensor forward(const Tensor& x) {
    input_ = x;
    return conv2d(x, weight.value, has_bias_ ? &bias.value : nullptr, geo_);
  }

  Tensor backward(const Tensor& grad_out) {
    return conv2d_backward(input_, weight.value, grad_out, geo_, &weight.grad, has_bias_ ? &bias.grad : nullptr);
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight});
    if (has_bias_) out.push_back({prefix + ".bias", &bias});
  }

  bool has_bias() const { return has_bias_; }
  std::size_t out_channels() const { return weight.value.dim(3); }

  Param weight;
  Param bias;

 private:
  ConvGeometry geo_;
  bool has_bias_ = false;
  Tensor input_;
};

class MaxPool2x2 {
 public:
  Tensor forward(const Tensor& x) {
    in_shape_ = x.shape();
    return max_pool2x2(x, &argmax_);
  }
  Tensor backward(const Tensor& grad_out) const { return max_pool2x2_backward(grad_out, argmax_, in_shape_); }

 private:
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

class ActivationLayer {
 public:
  explicit ActivationLayer(Activation kind = Activation::Relu) : kind_(kind) {}
  Tensor forward(const Tensor& x) {
    input_ = x;
    output_ = activation(x, kind_);
    return output_;
  }
  Tensor backward(const Tensor& grad_out) const { return activation_backward(input_, output_, grad_out, kind_); }

 private:
  Activation kind_;
  Tensor input_;
  Tensor output_;
};

class FullyConnected {
 public:
  FullyConnected() = default;
  FullyConnected(std::size_t in, std::size_t out) : weight({in, out}), bias(Shape{out}) {}

  template <typename Rng>
  void init(Rng& rng) {
    init_fan_in(weight.value, weight.value.dim(0), rng);
    bias.value.fill(0.0);
  }

  Tensor forward(const Tensor& x) {
    input_ = x;
    return fully_connected(x, weight.value, bias.value);
  }
  Tensor backward(const Tensor& grad_out) {
    return fully_connected_backward(input_, weight.value, grad_out, &weight.grad, &bias.grad);
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }

  Param weight;
  Param bias;

 private:
  Tensor input_;
};

class Dropout {
 public:
  explicit Dropout(double p = 0.5) : p_(p) {}

  template <typename Rng>
  Tensor forward(const Tensor& x, Mode mode, Rng& rng) {
    return dropout(x, p_, mode, rng, &mask_);
  }
  Tensor backward(const Tensor& grad_out) const { return dropout_backward(grad_out, mask_); }

  double p() const { return p_; }

 private:
  double p_;
  std::vector<double> mask_;
};

}  // namespace rpnforge
