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
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rpnforge/anchors.hpp"
#include "rpnforge/batch_norm.hpp"
#include "rpnforge/checkpoint.hpp"
#include "rpnforge/error.hpp"
#include "rpnforge/geometry.hpp"
#include "rpnforge/image.hpp"
#include "rpnforge/layers.hpp"
#include "rpnforge/losses.hpp"
#include "rpnforge/nms.hpp"
#include "rpnforge/optim.hpp"
#include "rpnforge/residual.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

using Rng = std::mt19937_64;

enum class AnchorVariant { Original, Extended };

inline const char* to_string(AnchorVariant v) { return v == AnchorVariant::Original ? "oRPN" : "eRPN"; }

struct DetectorConfig {
  // Feature extractor: one conv-bn-relu-pool stage per factor of two of the
  // stride, then `depth` blocks at the final resolution.
  BlockVariant extractor = BlockVariant::IdentityMapping;
  std::size_t depth = 2;
  std::size_t stem_width = 8;
  std::size_t channels = 16;
  std::size_t stride = 16;

  AnchorVariant anchor_variant = AnchorVariant::Extended;
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};
  std::size_t rpn_channels = 32;

  std::size_t roi_pool_h = 7;
  std::size_t roi_pool_w = 7;
  std::size_t fc_hidden = 128;
  double dropout = 0.5;

  std::size_t pre_nms_top_n = 2000;
  std::size_t post_nms_top_n_train = 300;
  std::size_t post_nms_top_n_test = 100;
  double rpn_nms_thresh = 0.7;
  double det_nms_thresh = 0.3;

  std::size_t rpn_batch = 256;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  std::size_t rois_per_image = 128;
  double fg_fraction = 0.25;
  double fg_iou = 0.5;

  double rpn_lambda = 10.0;
  double det_lambda = 1.0;
  double head_init_std = 0.01;

  // Index 0 is background.
  std::vector<std::string> classes{"__background__", "Car"};
  // Parameter-name prefixes excluded from updates, e.g. "extractor.stem".
  std::vector<std::string> frozen;

  std::size_t num_stages() const {
    std::size_t n = 0;
    for (std::size_t s = stride; s > 1; s >>= 1) ++n;
    return n;
  }

  std::size_t stage_width(std::size_t i) const {
    return std::min(channels, stem_width << std::min<std::size_t>(i, 16));
  }

  AnchorSpec anchor_spec() const {
    AnchorSpec s = anchor_variant == AnchorVariant::Original ? AnchorSpec::original(static_cast<double>(stride))
                                                             : AnchorSpec::extended(static_cast<double>(stride));
    s.ratios = anchor_ratios;
    return s;
  }

  std::size_t anchors_per_location() const { return anchor_spec().shapes_per_location(); }

  int class_index(const std::string& name) const {
    for (std::size_t i = 1; i < classes.size(); ++i) {
      if (classes[i] == name) return static_cast<int>(i);
    }
    return -1;
  }

  void validate() const {
    if (stride < 2 || (stride & (stride - 1)) != 0) fail("detector: stride ", stride, " must be a power of two >= 2");
    if (stem_width == 0 || channels == 0 || rpn_channels == 0 || fc_hidden == 0) {
      fail("detector: layer widths must be positive");
    }
    if (roi_pool_h < 1 || roi_pool_w < 1) fail("detector: roi pool dims must be >= 1");
    if (classes.size() < 2) fail("detector: need background plus at least one class");
    if (!(rpn_lambda > 0.0) || !(det_lambda > 0.0)) fail("detector: loss weights must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("detector: dropout must be in [0,1)");
    if (!(fg_fraction > 0.0 && fg_fraction <= 1.0)) fail("detector: fg_fraction must be in (0,1]");
    if (rois_per_image < 1) fail("detector: rois_per_image must be >= 1");
    anchor_spec().validate();
  }
};

struct Proposal {
  Box2D box;
  double objectness = 0.0;
};

struct GroundTruthBox {
  Box2D box;
  std::size_t class_id = 1;
};

// Preprocessed network input. `width`/`height` are the valid image extent
// inside the (possibly padded) tensor.
struct PreparedImage {
  Tensor tensor;
  double width = 0.0;
  double height = 0.0;
  double sigma = 1.0;
};

inline PreparedImage prepare_image(const Image& img, std::size_t stride, double long_max = 1000.0,
                                   double short_max = 600.0) {
  Preprocessed p = preprocess_image(img, long_max, short_max);
  PreparedImage out;
  out.width = static_cast<double>(p.tensor.dim(1));
  out.height = static_cast<double>(p.tensor.dim(0));
  out.sigma = p.sigma;
  out.tensor = pad_to_multiple(p.tensor, stride);
  return out;
}

// ---------------------------------------------------------------------------
// Feature extractor.

class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  explicit FeatureExtractor(const DetectorConfig& cfg) : stride_(cfg.stride) {
    std::size_t in = 3;
    for (std::size_t i = 0; i < cfg.num_stages(); ++i) {
      const std::size_t w = cfg.stage_width(i);
      stem_convs_.emplace_back(3, in, w, ConvGeometry{1, 1}, false);
      stem_bns_.emplace_back(w);
      stem_relus_.emplace_back(Activation::Relu);
      pools_.emplace_back();
      in = w;
    }
    out_channels_ = in;
    for (std::size_t i = 0; i < cfg.depth; ++i) blocks_.emplace_back(in, cfg.extractor);
  }

  template <typename R>
  void init(R& rng) {
    for (auto& c : stem_convs_) c.init(rng);
    for (auto& b : blocks_) b.init(rng);
  }

  Tensor forward(const Tensor& image, Mode mode) {
    ++forward_count_;
    if (image.rank() != 3 || image.dim(2) != 3) fail("extract_features: image must be [H,W,3]");
    if (image.dim(0) % stride_ != 0 || image.dim(1) % stride_ != 0) {
      fail("extract_features: image ", image.dim(0), "x", image.dim(1), " not divisible by stride ", stride_,
           "; pad the image first");
    }
    Tensor h = image;
    for (std::size_t i = 0; i < stem_convs_.size(); ++i) {
      h = stem_convs_[i].forward(h);
      h = stem_bns_[i].forward(h, mode);
      h = stem_relus_[i].forward(h);
      h = pools_[i].forward(h);
    }
    for (auto& b : blocks_) h = b.forward(h, mode);
    return h;
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor g = grad_out;
    for (std::size_t i = blocks_.size(); i-- > 0;) g = blocks_[i].backward(g);
    for (std::size_t i = stem_convs_.size(); i-- > 0;) {
      g = pools_[i].backward(g);
      g = stem_relus_[i].backward(g);
      g = stem_bns_[i].backward(g);
      g = stem_convs_[i].backward(g);
    }
    return g;
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < stem_convs_.size(); ++i) {
      const std::string p = prefix + ".stem" + std::to_string(i);
      stem_convs_[i].collect(out, p + ".conv");
      stem_bns_[i].collect(out, p + ".bn");
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
  }
  void collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < stem_bns_.size(); ++i) {
      stem_bns_[i].collect_buffers(out, prefix + ".stem" + std::to_string(i) + ".bn");
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect_buffers(out, prefix + ".block" + std::to_string(i));
    }
  }

  std::size_t out_channels() const { return out_channels_; }
  std::size_t forward_count() const { return forward_count_; }
  std::vector<ResidualBlock>& blocks() { return blocks_; }

 private:
  std::size_t stride_ = 16;
  std::size_t out_channels_ = 0;
  std::vector<Conv2d> stem_convs_;
  std::vector<BatchNorm> stem_bns_;
  std::vector<ActivationLayer> stem_relus_;
  std::vector<MaxPool2x2> pools_;
  std::vector<ResidualBlock> blocks_;
  std::size_t forward_count_ = 0;
};

// ---------------------------------------------------------------------------
// Region proposal head: 3x3 conv then 1x1 objectness (2 per anchor) and
// 1x1 regression (4 per anchor). The [H, W, 2k] and [H, W, 4k] outputs are
// already in anchor-grid order, so they reshape directly to [A, 2] / [A, 4].

struct RpnOutput {
  Tensor logits;  // [A, 2]: background, object
  Tensor deltas;  // [A, 4]: tx, ty, tw, th
  std::size_t feat_h = 0;
  std::size_t feat_w = 0;
};

class RpnHead {
 public:
  RpnHead() = default;
  RpnHead(std::size_t in_channels, std::size_t mid, std::size_t k)
      : conv(3, in_channels, mid, {1, 1}, true), cls(1, mid, 2 * k, {1, 0}, true), reg(1, mid, 4 * k, {1, 0}, true) {}

  template <typename R>
  void init(R& rng, double head_std) {
    conv.init(rng);
    init_gaussian(cls.weight.value, head_std, rng);
    init_gaussian(reg.weight.value, head_std, rng);
  }

  RpnOutput forward(const Tensor& features) {
    const Tensor h = relu_.forward(conv.forward(features));
    RpnOutput out;
    out.feat_h = features.dim(0);
    out.feat_w = features.dim(1);
    Tensor c = cls.forward(h);
    Tensor r = reg.forward(h);
    const std::size_t a = c.size() / 2;
    out_shape_c_ = c.shape();
    out_shape_r_ = r.shape();
    out.logits = std::move(c).reshaped({a, 2});
    out.deltas = std::move(r).reshaped({a, 4});
    return out;
  }

  Tensor backward(const Tensor& grad_logits, const Tensor& grad_deltas) {
    Tensor g = cls.backward(grad_logits.reshaped(out_shape_c_));
    g += reg.backward(grad_deltas.reshaped(out_shape_r_));
    return conv.backward(relu_.backward(g));
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    conv.collect(out, prefix + ".conv");
    cls.collect(out, prefix + ".cls");
    reg.collect(out, prefix + ".reg");
  }

  Conv2d conv;
  Conv2d cls;
  Conv2d reg;

 private:
  ActivationLayer relu_{Activation::Relu};
  Shape out_shape_c_;
  Shape out_shape_r_;
};

// ---------------------------------------------------------------------------
// RoI max pooling. The roi is projected by 1/stride onto feature cells
// [floor(x1/s), ceil(x2/s)), and that span is split into out_w bins with
// edges floor(j*n/out_w) and ceil((j+1)*n/out_w). Bins never come out empty:
// when the span is narrower than the grid, neighbouring bins share a cell.

struct CellSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline CellSpan project_span(double lo, double hi, double stride, std::size_t extent) {
  const double a = lo / stride;
  const double b = hi / stride;
  if (!(b > a)) fail("roi_pool: zero-area projected roi");
  auto begin = static_cast<std::ptrdiff_t>(std::floor(a));
  auto end = static_cast<std::ptrdiff_t>(std::ceil(b));
  const auto n = static_cast<std::ptrdiff_t>(extent);
  begin = std::clamp<std::ptrdiff_t>(begin, 0, n - 1);
  end = std::clamp<std::ptrdiff_t>(end, begin + 1, n);
  return {static_cast<std::size_t>(begin), static_cast<std::size_t>(end)};
}

inline Tensor roi_pool(const Tensor& features, const Box2D& roi, double stride, std::size_t out_h, std::size_t out_w,
                       std::vector<std::size_t>* argmax = nullptr) {
  if (features.rank() != 3) fail("roi_pool: features must be [H,W,C]");
  if (out_h < 1 || out_w < 1) fail("roi_pool: output grid must be at least 1x1");
  const std::size_t W = features.dim(1), C = features.dim(2);
  const CellSpan ys = project_span(roi.y1, roi.y2, stride, features.dim(0));
  const CellSpan xs = project_span(roi.x1, roi.x2, stride, W);
  const std::size_t nh = ys.end - ys.begin;
  const std::size_t nw = xs.end - xs.begin;
  Tensor out({out_h, out_w, C});
  if (argmax) argmax->assign(out.size(), 0);
  for (std::size_t by = 0; by < out_h; ++by) {
    const std::size_t y0 = ys.begin + (by * nh) / out_h;
    const std::size_t y1 = ys.begin + ((by + 1) * nh + out_h - 1) / out_h;
    for (std::size_t bx = 0; bx < out_w; ++bx) {
      const std::size_t x0 = xs.begin + (bx * nw) / out_w;
      const std::size_t x1 = xs.begin + ((bx + 1) * nw + out_w - 1) / out_w;
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t best = (y0 * W + x0) * C + c;
        double best_v = features[best];
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) {
            const std::size_t idx = (y * W + x) * C + c;
            if (features[idx] > best_v) {
              best_v = features[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = (by * out_w + bx) * C + c;
        out[o] = best_v;
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

class RoiPool {
 public:
  RoiPool() = default;
  RoiPool(double stride, std::size_t out_h, std::size_t out_w) : stride_(stride), out_h_(out_h), out_w_(out_w) {}

  // [R, out_h, out_w, C]
  Tensor forward(const Tensor& features, const std::vector<Box2D>& rois) {
    feat_shape_ = features.shape();
    const std::size_t per = out_h_ * out_w_ * features.dim(2);
    Tensor out({rois.size(), out_h_, out_w_, features.dim(2)});
    argmax_.assign(rois.size() * per, 0);
    std::vector<std::size_t> am;
    for (std::size_t r = 0; r < rois.size(); ++r) {
      const Tensor p = roi_pool(features, rois[r], stride_, out_h_, out_w_, &am);
      std::copy(p.values().begin(), p.values().end(), out.data() + r * per);
      std::copy(am.begin(), am.end(), argmax_.begin() + static_cast<std::ptrdiff_t>(r * per));
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) const {
    Tensor g(feat_shape_);
    for (std::size_t i = 0; i < argmax_.size(); ++i) g[argmax_[i]] += grad_out[i];
    return g;
  }

 private:
  double stride_ = 16.0;
  std::size_t out_h_ = 7;
  std::size_t out_w_ = 7;
  Shape feat_shape_;
  std::vector<std::size_t> argmax_;
};

// ---------------------------------------------------------------------------
// Prediction head: flatten, two relu+dropout FC layers, then a class-score
// layer and a per-class box regression layer (4 outputs per class).

struct HeadOutput {
  Tensor logits;  // [R, num_classes]
  Tensor deltas;  // [R, 4 * num_classes]
};

class PredictionHead {
 public:
  PredictionHead() = default;
  PredictionHead(std::size_t in_features, std::size_t hidden, std::size_t num_classes, double dropout_p)
      : fc1(in_features, hidden),
        fc2(hidden, hidden),
        cls(hidden, num_classes),
        reg(hidden, 4 * num_classes),
        drop1_(dropout_p),
        drop2_(dropout_p) {}

  template <typename R>
  void init(R& rng, double head_std) {
    fc1.init(rng);
    fc2.init(rng);
    init_gaussian(cls.weight.value, head_std, rng);
    init_gaussian(reg.weight.value, head_std, rng);
  }

  template <typename R>
  HeadOutput forward(const Tensor& pooled, Mode mode, R& rng) {
    in_shape_ = pooled.shape();
    const std::size_t n = pooled.dim(0);
    Tensor x = pooled.reshaped({n, pooled.size() / std::max<std::size_t>(n, 1)});
    x = drop1_.forward(relu1_.forward(fc1.forward(x)), mode, rng);
    x = drop2_.forward(relu2_.forward(fc2.forward(x)), mode, rng);
    return {cls.forward(x), reg.forward(x)};
  }

  Tensor backward(const Tensor& grad_logits, const Tensor& grad_deltas) {
    Tensor g = cls.backward(grad_logits);
    g += reg.backward(grad_deltas);
    g = fc2.backward(relu2_.backward(drop2_.backward(g)));
    g = fc1.backward(relu1_.backward(drop1_.backward(g)));
    return std::move(g).reshaped(in_shape_);
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
    cls.collect(out, prefix + ".cls");
    reg.collect(out, prefix + ".reg");
  }

  FullyConnected fc1;
  FullyConnected fc2;
  FullyConnected cls;
  FullyConnected reg;

 private:
  ActivationLayer relu1_{Activation::Relu};
  ActivationLayer relu2_{Activation::Relu};
  Dropout drop1_;
  Dropout drop2_;
  Shape in_shape_;
};

// ---------------------------------------------------------------------------
// Losses.

struct RpnLoss {
  double total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  Tensor grad_logits;
  Tensor grad_deltas;
};

// L_cls averages cross-entropy over the sampled anchors; L_reg sums
// smooth-L1 over sampled positives only, scaled by lambda / n_reg.
inline RpnLoss rpn_loss(const Tensor& logits, const Tensor& deltas, const std::vector<AnchorLabel>& labels,
                        const std::vector<std::size_t>& sampled, const std::vector<BoxDelta>& targets, double lambda,
                        double n_reg) {
  if (sampled.empty()) fail("rpn_loss: empty anchor sample");
  const std::size_t A = labels.size();
  if (logits.size() != 2 * A || deltas.size() != 4 * A || targets.size() != A) {
    fail("rpn_loss: head outputs do not match the anchor count ", A);
  }
  if (!(n_reg > 0.0)) fail("rpn_loss: n_reg must be positive");
  RpnLoss out;
  out.grad_logits = Tensor(logits.shape());
  out.grad_deltas = Tensor(deltas.shape());
  const double inv_cls = 1.0 / static_cast<double>(sampled.size());
  const double reg_scale = lambda / n_reg;
  for (std::size_t idx : sampled) {
    const AnchorLabel& lab = labels.at(idx);
    if (lab.is_ignore()) fail("rpn_loss: sampled anchor ", idx, " is labelled Ignore");
    const Tensor l({2}, {logits[2 * idx], logits[2 * idx + 1]});
    const LossGrad ce = softmax_cross_entropy(l, lab.is_positive() ? 1 : 0);
    out.cls += ce.loss * inv_cls;
    out.grad_logits[2 * idx] += ce.grad[0] * inv_cls;
    out.grad_logits[2 * idx + 1] += ce.grad[1] * inv_cls;
    if (lab.is_positive()) {
      const BoxDelta& t = targets[idx];
      const double tv[4] = {t.tx, t.ty, t.tw, t.th};
      for (std::size_t c = 0; c < 4; ++c) {
        const double d = deltas[4 * idx + c] - tv[c];
        out.reg += reg_scale * smooth_l1_scalar(d);
        out.grad_deltas[4 * idx + c] += reg_scale * smooth_l1_grad_scalar(d);
      }
    }
  }
  out.total = out.cls + out.reg;
  return out;
}

struct DetLoss {
  double total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  Tensor grad_logits;  // [C]
  Tensor grad_deltas;  // [4C]
};

// -log p_u + lambda [u >= 1] sum_i smooth_l1(t^u_i - v_i), where only class
// u's four regression outputs take part.
inline DetLoss detection_loss(const Tensor& class_logits, const Tensor& deltas, std::size_t u,
                              const std::optional<BoxDelta>& v, double lambda) {
  const std::size_t C = class_logits.size();
  if (u >= C) fail("detection_loss: class ", u, " out of range [0,", C, ")");
  if (deltas.size() != 4 * C) fail("detection_loss: regression width ", deltas.size(), " != 4 * ", C);
  const LossGrad ce = softmax_cross_entropy(class_logits.reshaped({C}), u);
  DetLoss out;
  out.cls = ce.loss;
  out.grad_logits = ce.grad.reshaped(class_logits.shape());
  out.grad_deltas = Tensor(deltas.shape());
  if (u >= 1) {
    if (!v) fail("detection_loss: foreground class ", u, " needs a regression target");
    const double tv[4] = {v->tx, v->ty, v->tw, v->th};
    for (std::size_t c = 0; c < 4; ++c) {
      const double d = deltas[4 * u + c] - tv[c];
      out.reg += lambda * smooth_l1_scalar(d);
      out.grad_deltas[4 * u + c] = lambda * smooth_l1_grad_scalar(d);
    }
  }
  out.total = out.cls + out.reg;
  return out;
}

// ---------------------------------------------------------------------------
// Proposal generation and RoI sampling.

// Caps exp() in decoding at a 1000/16 scale-up, as boxes beyond that are
// meaningless for any image this runs on.
inline BoxDelta clamp_delta(BoxDelta d) {
  static const double kMaxLog = std::log(1000.0 / 16.0);
  d.tw = std::min(d.tw, kMaxLog);
  d.th = std::min(d.th, kMaxLog);
  return d;
}

inline double objectness(const Tensor& logits, std::size_t a) {
  const double z = logits[2 * a + 1] - logits[2 * a];
  return activate(z, Activation::Sigmoid);
}

// Decode, clip, drop boxes under 1 px per side, keep the pre_nms_top_n most
// object-like (anchor index breaks ties), greedy NMS, keep post_nms_top_n.
inline std::vector<Proposal> generate_proposals(const Tensor& logits, const Tensor& deltas, const AnchorGrid& grid,
                                                double image_w, double image_h, std::size_t pre_nms_top_n,
                                                std::size_t post_nms_top_n, double nms_thresh) {
  const std::size_t A = grid.size();
  if (logits.size() != 2 * A || deltas.size() != 4 * A) fail("generate_proposals: head outputs do not match grid");
  std::vector<ScoredBox> cand;
  cand.reserve(A);
  for (std::size_t a = 0; a < A; ++a) {
    const BoxDelta d = clamp_delta({deltas[4 * a], deltas[4 * a + 1], deltas[4 * a + 2], deltas[4 * a + 3]});
    if (!d.finite()) continue;
    const Box2D b = clip_box(decode_box(grid.anchors[a], d), image_w, image_h);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    cand.push_back({b, objectness(logits, a), 0, a});
  }
  std::stable_sort(cand.begin(), cand.end(), score_order);
  if (cand.size() > pre_nms_top_n) cand.resize(pre_nms_top_n);
  auto kept = greedy_nms(std::move(cand), nms_thresh);
  if (kept.size() > post_nms_top_n) kept.resize(post_nms_top_n);
  std::vector<Proposal> out;
  out.reserve(kept.size());
  for (const auto& k : kept) out.push_back({k.box, k.score});
  return out;
}

struct RoiTargets {
  std::vector<Box2D> rois;
  std::vector<std::size_t> classes;  // 0 = background
  std::vector<BoxDelta> targets;     // meaningful where classes[i] >= 1
};

// Ground truths join the candidates so every image contributes foreground.
// Candidates at IoU >= fg_iou with their best ground truth take its class;
// the rest are background. Foreground is capped at fg_fraction of the
// sample and background fills the remainder.
template <typename R>
RoiTargets sample_rois(const std::vector<Proposal>& proposals, const std::vector<GroundTruthBox>& gts,
                       const DetectorConfig& cfg, R& rng) {
  std::vector<Box2D> cand;
  cand.reserve(proposals.size() + gts.size());
  for (const auto& p : proposals) cand.push_back(p.box);
  for (const auto& g : gts) cand.push_back(g.box);

  std::vector<std::size_t> fg, bg;
  std::vector<std::size_t> match(cand.size(), 0);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    double best = 0.0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(cand[i], gts[j].box);
      if (v > best) {
        best = v;
        match[i] = j;
      }
    }
    if (!gts.empty() && best >= cfg.fg_iou) fg.push_back(i);
    else bg.push_back(i);
  }

  auto take = [&rng](std::vector<std::size_t>& pool, std::size_t want) {
    want = std::min(want, pool.size());
    for (std::size_t i = 0; i < want; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(want);
  };
  const auto fg_quota = static_cast<std::size_t>(std::lround(cfg.fg_fraction * static_cast<double>(cfg.rois_per_image)));
  take(fg, fg_quota);
  take(bg, cfg.rois_per_image - fg.size());

  RoiTargets out;
  for (std::size_t i : fg) {
    const auto& g = gts[match[i]];
    out.rois.push_back(cand[i]);
    out.classes.push_back(g.class_id);
    out.targets.push_back(encode_box(cand[i], g.box));
  }
  for (std::size_t i : bg) {
    out.rois.push_back(cand[i]);
    out.classes.push_back(0);
    out.targets.push_back({});
  }
  return out;
}

// ---------------------------------------------------------------------------
// The detector.

struct LossBreakdown {
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double det_cls = 0.0;
  double det_reg = 0.0;
  double total = 0.0;

  bool finite() const {
    return std::isfinite(rpn_cls) && std::isfinite(rpn_reg) && std::isfinite(det_cls) && std::isfinite(det_reg) &&
           std::isfinite(total);
  }
};

// Everything a training step samples. Reusing one instance across calls pins
// the discrete choices, which is what finite-difference checks need.
struct TrainingTargets {
  bool ready = false;
  std::vector<AnchorLabel> labels;
  std::vector<std::size_t> sampled;
  std::vector<BoxDelta> anchor_targets;
  RoiTargets rois;
};

class Detector {
 public:
  Detector() = default;
  Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    extractor = FeatureExtractor(cfg_);
    const std::size_t c = extractor.out_channels();
    rpn = RpnHead(c, cfg_.rpn_channels, cfg_.anchors_per_location());
    roi_pool_layer = RoiPool(static_cast<double>(cfg_.stride), cfg_.roi_pool_h, cfg_.roi_pool_w);
    head = PredictionHead(cfg_.roi_pool_h * cfg_.roi_pool_w * c, cfg_.fc_hidden, cfg_.classes.size(), cfg_.dropout);
    Rng rng(seed);
    extractor.init(rng);
    rpn.init(rng, cfg_.head_init_std);
    head.init(rng, cfg_.head_init_std);
    apply_freeze();
  }

  const DetectorConfig& config() const { return cfg_; }

  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> out;
    extractor.collect(out, "extractor");
    rpn.collect(out, "rpn");
    head.collect(out, "head");
    return out;
  }

  std::vector<NamedBuffer> buffers() {
    std::vector<NamedBuffer> out;
    extractor.collect_buffers(out, "extractor");
    return out;
  }

  void apply_freeze() {
    for (auto& np : parameters()) {
      np.param->frozen = std::any_of(cfg_.frozen.begin(), cfg_.frozen.end(), [&](const std::string& prefix) {
        return np.name.compare(0, prefix.size(), prefix) == 0;
      });
    }
  }

  void zero_grad() {
    for (auto& np : parameters()) np.param->zero_grad();
  }

  std::string save_checkpoint() {
    std::vector<std::pair<std::string, const Tensor*>> records;
    for (auto& np : parameters()) records.emplace_back(np.name, &np.param->value);
    for (auto& nb : buffers()) records.emplace_back(nb.name, nb.tensor);
    return encode_checkpoint(records);
  }

  void load_checkpoint(const std::string& bytes) {
    TensorMap m = decode_checkpoint(bytes);
    auto take = [&m](const std::string& name, Tensor& dst) {
      auto it = m.find(name);
      if (it == m.end()) fail("checkpoint lacks '", name, "'; was it written with a different configuration?");
      if (it->second.shape() != dst.shape()) {
        fail("checkpoint '", name, "' has shape ", shape_string(it->second.shape()), ", model expects ",
             shape_string(dst.shape()));
      }
      dst = std::move(it->second);
      m.erase(it);
    };
    for (auto& np : parameters()) take(np.name, np.param->value);
    for (auto& nb : buffers()) take(nb.name, *nb.tensor);
    if (!m.empty()) fail("checkpoint has record '", m.begin()->first, "' unknown to this model configuration");
  }

  FeatureExtractor extractor;
  RpnHead rpn;
  RoiPool roi_pool_layer;
  PredictionHead head;

 private:
  DetectorConfig cfg_;
};

inline AnchorGrid anchor_grid_for(const DetectorConfig& cfg, std::size_t feat_h, std::size_t feat_w) {
  return generate_anchors(cfg.anchor_spec(), feat_h, feat_w);
}

// One shared extractor pass feeds both stages. Gradients of both losses
// accumulate into the shared features before a single extractor backward.
// Proposals and sampled RoIs are treated as constants of the step.
template <typename R>
LossBreakdown compute_loss(Detector& model, const PreparedImage& image, const std::vector<GroundTruthBox>& gts,
                           R& rng, TrainingTargets& targets, bool backward) {
  const DetectorConfig& cfg = model.config();
  const Tensor feat = model.extractor.forward(image.tensor, Mode::Train);
  const RpnOutput rpn_out = model.rpn.forward(feat);
  const AnchorGrid grid = anchor_grid_for(cfg, rpn_out.feat_h, rpn_out.feat_w);

  if (!targets.ready) {
    std::vector<Box2D> boxes;
    for (const auto& g : gts) boxes.push_back(g.box);
    targets.labels = label_anchors(grid, boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
    targets.sampled = sample_minibatch(targets.labels, cfg.rpn_batch, rng);
    targets.anchor_targets.assign(grid.size(), BoxDelta{});
    for (std::size_t a = 0; a < grid.size(); ++a) {
      if (targets.labels[a].is_positive()) {
        targets.anchor_targets[a] = encode_box(grid.anchors[a], gts[targets.labels[a].gt_index()].box);
      }
    }
    const auto proposals =
        generate_proposals(rpn_out.logits, rpn_out.deltas, grid, image.width, image.height, cfg.pre_nms_top_n,
                           cfg.post_nms_top_n_train, cfg.rpn_nms_thresh);
    targets.rois = sample_rois(proposals, gts, cfg, rng);
    targets.ready = true;
  }

  const RpnLoss rl = rpn_loss(rpn_out.logits, rpn_out.deltas, targets.labels, targets.sampled,
                              targets.anchor_targets, cfg.rpn_lambda,
                              static_cast<double>(rpn_out.feat_h * rpn_out.feat_w));

  LossBreakdown lb;
  lb.rpn_cls = rl.cls;
  lb.rpn_reg = rl.reg;

  const auto& rt = targets.rois;
  const std::size_t nroi = rt.rois.size();
  const std::size_t C = cfg.classes.size();
  Tensor grad_feat(feat.shape());
  if (nroi > 0) {
    const Tensor pooled = model.roi_pool_layer.forward(feat, rt.rois);
    const HeadOutput ho = model.head.forward(pooled, Mode::Train, rng);
    Tensor g_logits(ho.logits.shape());
    Tensor g_deltas(ho.deltas.shape());
    const double inv = 1.0 / static_cast<double>(nroi);
    for (std::size_t r = 0; r < nroi; ++r) {
      const Tensor lr({C}, std::vector<double>(ho.logits.data() + r * C, ho.logits.data() + (r + 1) * C));
      const Tensor dr({4 * C}, std::vector<double>(ho.deltas.data() + r * 4 * C, ho.deltas.data() + (r + 1) * 4 * C));
      std::optional<BoxDelta> v;
      if (rt.classes[r] >= 1) v = rt.targets[r];
      const DetLoss dl = detection_loss(lr, dr, rt.classes[r], v, cfg.det_lambda);
      lb.det_cls += dl.cls * inv;
      lb.det_reg += dl.reg * inv;
      for (std::size_t c = 0; c < C; ++c) g_logits[r * C + c] = dl.grad_logits[c] * inv;
      for (std::size_t c = 0; c < 4 * C; ++c) g_deltas[r * 4 * C + c] = dl.grad_deltas[c] * inv;
    }
    if (backward) grad_feat = model.roi_pool_layer.backward(model.head.backward(g_logits, g_deltas));
  }
  lb.total = ((lb.rpn_cls + lb.rpn_reg) + lb.det_cls) + lb.det_reg;

  if (backward) {
    if (!lb.finite()) {
      fail("non-finite loss: total=", lb.total, " rpn_cls=", lb.rpn_cls, " rpn_reg=", lb.rpn_reg,
           " det_cls=", lb.det_cls, " det_reg=", lb.det_reg);
    }
    grad_feat += model.rpn.backward(rl.grad_logits, rl.grad_deltas);
    model.extractor.backward(grad_feat);
  }
  return lb;
}

// Zero grads, joint forward/backward, one optimizer update. A non-finite
// loss throws before any parameter moves.
template <typename R>
LossBreakdown train_step(Detector& model, const PreparedImage& image, const std::vector<GroundTruthBox>& gts,
                         Sgd& opt, R& rng) {
  model.zero_grad();
  TrainingTargets targets;
  const LossBreakdown lb = compute_loss(model, image, gts, rng, targets, true);
  opt.step(model.parameters());
  return lb;
}

// Full inference. Returned boxes are in the coordinates of the image before
// preprocessing (scaled back up by sigma); class_id indexes cfg.classes.
inline std::vector<ScoredBox> detect(Detector& model, const PreparedImage& image, double score_thresh) {
  const DetectorConfig& cfg = model.config();
  const Tensor feat = model.extractor.forward(image.tensor, Mode::Eval);
  const RpnOutput rpn_out = model.rpn.forward(feat);
  const AnchorGrid grid = anchor_grid_for(cfg, rpn_out.feat_h, rpn_out.feat_w);
  const auto proposals = generate_proposals(rpn_out.logits, rpn_out.deltas, grid, image.width, image.height,
                                            cfg.pre_nms_top_n, cfg.post_nms_top_n_test, cfg.rpn_nms_thresh);
  if (proposals.empty()) return {};
  std::vector<Box2D> rois;
  for (const auto& p : proposals) rois.push_back(p.box);
  const Tensor pooled = model.roi_pool_layer.forward(feat, rois);
  Rng unused(0);
  const HeadOutput ho = model.head.forward(pooled, Mode::Eval, unused);
  const std::size_t C = cfg.classes.size();
  std::vector<ScoredBox> dets;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const auto probs = softmax(std::span<const double>(ho.logits.data() + r * C, C));
    for (std::size_t c = 1; c < C; ++c) {
      if (probs[c] < score_thresh) continue;
      const double* d = ho.deltas.data() + r * 4 * C + 4 * c;
      const BoxDelta delta = clamp_delta({d[0], d[1], d[2], d[3]});
      if (!delta.finite()) continue;
      const Box2D b = clip_box(decode_box(rois[r], delta), image.width, image.height);
      if (b.width() < 1.0 || b.height() < 1.0) continue;
      dets.push_back({scale_box(b, 1.0 / image.sigma), std::clamp(probs[c], 0.0, 1.0), static_cast<int>(c), dets.size()});
    }
  }
  return per_class_nms(dets, cfg.det_nms_thresh);
}

}  // namespace rpnforge
