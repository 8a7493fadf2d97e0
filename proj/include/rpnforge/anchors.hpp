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
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/geometry.hpp"

namespace rpnforge {

// Scales are anchor side lengths in pixels (area = scale^2); ratios are
// height:width.
struct AnchorSpec {
  std::vector<double> scales;
  std::vector<double> ratios;
  double stride = 16.0;

  std::size_t shapes_per_location() const { return scales.size() * ratios.size(); }

  void validate() const {
    if (scales.empty() || ratios.empty()) fail("anchor spec needs at least one scale and one ratio");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (!(scales[i] > 0.0)) fail("anchor scale ", scales[i], " must be positive");
      if (i > 0 && !(scales[i] > scales[i - 1])) fail("anchor scales must be strictly increasing");
    }
    for (double r : ratios) {
      if (!(r > 0.0)) fail("anchor ratio ", r, " must be positive");
    }
    if (!(stride >= 1.0)) fail("anchor stride must be >= 1, got ", stride);
  }

  // [128, 256, 512]
  static AnchorSpec original(double stride = 16.0) {
    return {{128.0, 256.0, 512.0}, {0.5, 1.0, 2.0}, stride};
  }
  // [32, 64, 128, 256, 512]
  static AnchorSpec extended(double stride = 16.0) {
    return {{32.0, 64.0, 128.0, 256.0, 512.0}, {0.5, 1.0, 2.0}, stride};
  }
};

struct AnchorShape {
  double width = 0.0;
  double height = 0.0;
};

struct AnchorGrid {
  std::vector<Box2D> anchors;
  std::size_t feat_h = 0;
  std::size_t feat_w = 0;
  AnchorSpec spec;

  std::size_t k() const { return spec.shapes_per_location(); }
  std::size_t size() const { return anchors.size(); }
};

// Positive carries the index of the ground truth the anchor regresses to.
class AnchorLabel {
 public:
  enum class Kind : std::uint8_t { Negative, Positive, Ignore };

  static AnchorLabel positive(std::size_t gt) { return AnchorLabel(Kind::Positive, gt); }
  static AnchorLabel negative() { return AnchorLabel(Kind::Negative, 0); }
  static AnchorLabel ignore() { return AnchorLabel(Kind::Ignore, 0); }

  Kind kind() const { return kind_; }
  bool is_positive() const { return kind_ == Kind::Positive; }
  bool is_negative() const { return kind_ == Kind::Negative; }
  bool is_ignore() const { return kind_ == Kind::Ignore; }
  std::size_t gt_index() const { return gt_; }

  friend bool operator==(const AnchorLabel&, const AnchorLabel&) = default;

 private:
  AnchorLabel(Kind kind, std::size_t gt) : kind_(kind), gt_(gt) {}
  Kind kind_;
  std::size_t gt_;
};

// Order: scale-major, ratio-minor.
inline std::vector<AnchorShape> build_anchor_shapes(const AnchorSpec& spec) {
  spec.validate();
  std::vector<AnchorShape> shapes;
  shapes.reserve(spec.shapes_per_location());
  for (double s : spec.scales) {
    for (double r : spec.ratios) {
      const double root = std::sqrt(r);
      shapes.push_back({s / root, s * root});
    }
  }
  return shapes;
}

inline AnchorGrid generate_anchors(const AnchorSpec& spec, std::size_t feat_h, std::size_t feat_w) {
  if (feat_h < 1 || feat_w < 1) fail("generate_anchors: feature map must be at least 1x1");
  const auto shapes = build_anchor_shapes(spec);
  AnchorGrid grid;
  grid.feat_h = feat_h;
  grid.feat_w = feat_w;
  grid.spec = spec;
  grid.anchors.reserve(feat_h * feat_w * shapes.size());
  for (std::size_t row = 0; row < feat_h; ++row) {
    const double cy = (static_cast<double>(row) + 0.5) * spec.stride;
    for (std::size_t col = 0; col < feat_w; ++col) {
      const double cx = (static_cast<double>(col) + 0.5) * spec.stride;
      for (const auto& sh : shapes) {
        grid.anchors.push_back(Box2D::from_center(cx, cy, sh.width, sh.height));
      }
    }
  }
  return grid;
}

// Anchors are positive when they are the best match of some ground truth
// (every tied anchor counts) or overlap any ground truth above pos_thresh.
// The regression partner of a positive is its own highest-IoU ground truth,
// lowest index on ties.
inline std::vector<AnchorLabel> label_anchors(const AnchorGrid& grid, const std::vector<Box2D>& gts,
                                              double pos_thresh = 0.7, double neg_thresh = 0.3) {
  if (!(0.0 <= neg_thresh && neg_thresh <= pos_thresh && pos_thresh <= 1.0)) {
    fail("label_anchors: need 0 <= neg_thresh <= pos_thresh <= 1");
  }
  const std::size_t n = grid.anchors.size();
  std::vector<AnchorLabel> labels(n, AnchorLabel::negative());
  if (gts.empty()) return labels;

  const std::size_t g = gts.size();
  std::vector<double> overlaps(n * g);
  std::vector<double> gt_best(g, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t j = 0; j < g; ++j) {
      const double v = iou(grid.anchors[a], gts[j]);
      overlaps[a * g + j] = v;
      gt_best[j] = std::max(gt_best[j], v);
    }
  }

  for (std::size_t a = 0; a < n; ++a) {
    std::size_t best_j = 0;
    double best = overlaps[a * g];
    bool argmax_hit = false;
    for (std::size_t j = 0; j < g; ++j) {
      const double v = overlaps[a * g + j];
      if (v > best) {
        best = v;
        best_j = j;
      }
      if (gt_best[j] > 0.0 && v == gt_best[j]) argmax_hit = true;
    }
    if (argmax_hit || best > pos_thresh) {
      labels[a] = AnchorLabel::positive(best_j);
    } else if (best < neg_thresh) {
      labels[a] = AnchorLabel::negative();
    } else {
      labels[a] = AnchorLabel::ignore();
    }
  }
  return labels;
}

// Half of the cap goes to positives; negatives backfill whatever remains.
template <typename Rng>
std::vector<std::size_t> sample_minibatch(const std::vector<AnchorLabel>& labels, std::size_t cap, Rng& rng) {
  if (cap < 2) fail("sample_minibatch: cap must be >= 2");
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].is_positive()) pos.push_back(i);
    else if (labels[i].is_negative()) neg.push_back(i);
  }
  if (pos.empty() && neg.empty()) fail("sample_minibatch: no positive or negative anchors, image is untrainable");

  auto take = [&rng](std::vector<std::size_t>& pool, std::size_t want) {
    want = std::min(want, pool.size());
    // Partial Fisher-Yates keeps the draw uniform and seed-deterministic.
    for (std::size_t i = 0; i < want; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(want);
  };

  take(pos, cap / 2);
  take(neg, cap - pos.size());
  std::vector<std::size_t> out;
  out.reserve(pos.size() + neg.size());
  out.insert(out.end(), pos.begin(), pos.end());
  out.insert(out.end(), neg.begin(), neg.end());
  return out;
}

// Fraction of ground truths whose best anchor over the full grid of an
// image_w x image_h image reaches iou_thresh.
inline double anchor_coverage_recall(const AnchorSpec& spec, double image_w, double image_h,
                                     const std::vector<Box2D>& gts, double iou_thresh) {
  if (gts.empty()) fail("anchor_coverage_recall: no ground truths");
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) fail("anchor_coverage_recall: threshold must be in (0,1]");
  const auto fh = static_cast<std::size_t>(std::max(1.0, std::floor(image_h / spec.stride)));
  const auto fw = static_cast<std::size_t>(std::max(1.0, std::floor(image_w / spec.stride)));
  const AnchorGrid grid = generate_anchors(spec, fh, fw);
  std::size_t hits = 0;
  for (const auto& gt : gts) {
    double best = 0.0;
    for (const auto& a : grid.anchors) best = std::max(best, iou(a, gt));
    if (best >= iou_thresh) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(gts.size());
}

// One anchor per line: `row col shape_idx x1 y1 x2 y2`.
inline void write_anchor_dump(std::ostream& os, const AnchorGrid& grid) {
  const std::size_t k = grid.k();
  char buf[160];
  for (std::size_t i = 0; i < grid.anchors.size(); ++i) {
    const std::size_t loc = i / k;
    const auto& b = grid.anchors[i];
    std::snprintf(buf, sizeof(buf), "%zu %zu %zu %.4f %.4f %.4f %.4f\n", loc / grid.feat_w,
                  loc % grid.feat_w, i % k, b.x1, b.y1, b.x2, b.y2);
    os << buf;
  }
}

}  // namespace rpnforge
