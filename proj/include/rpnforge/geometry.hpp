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
#include <limits>
#include <ostream>

#include "rpnforge/error.hpp"

namespace rpnforge {

// Axis-aligned box in pixel coordinates, origin at the upper-left image
// corner. Boxes are half-open: [x1, x2) x [y1, y2).
struct Box2D {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  constexpr Box2D() = default;
  constexpr Box2D(double x1_, double y1_, double x2_, double y2_)
      : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {}

  static Box2D from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x1 <= x2 && y1 <= y2;
  }

  friend bool operator==(const Box2D&, const Box2D&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Box2D& b) {
  return os << '[' << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << ']';
}

// Regression target relative to a reference box: center offsets scaled by
// the reference size, and log size ratios.
struct BoxDelta {
  double tx = 0.0;
  double ty = 0.0;
  double tw = 0.0;
  double th = 0.0;

  bool finite() const {
    return std::isfinite(tx) && std::isfinite(ty) && std::isfinite(tw) &&
           std::isfinite(th);
  }

  friend bool operator==(const BoxDelta&, const BoxDelta&) = default;
};

inline Box2D make_box(double x1, double y1, double x2, double y2) {
  Box2D b{x1, y1, x2, y2};
  if (!b.valid()) fail("invalid box ", b, ": need finite x1<=x2, y1<=y2");
  return b;
}

inline double intersection_area(const Box2D& a, const Box2D& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

// Zero whenever either box has zero area.
inline double iou(const Box2D& a, const Box2D& b) {
  const double area_a = a.area();
  const double area_b = b.area();
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  // Sum written symmetrically so iou(a,b) == iou(b,a) bit for bit.
  const double uni = (area_a + area_b) - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline BoxDelta encode_box(const Box2D& anchor, const Box2D& target) {
  const double wa = anchor.width();
  const double ha = anchor.height();
  if (!(wa > 0.0 && ha > 0.0)) fail("encode_box: anchor ", anchor, " has non-positive size");
  const double wt = target.width();
  const double ht = target.height();
  if (!(wt > 0.0 && ht > 0.0)) fail("encode_box: degenerate ground-truth box ", target);
  return {(target.cx() - anchor.cx()) / wa, (target.cy() - anchor.cy()) / ha,
          std::log(wt / wa), std::log(ht / ha)};
}

inline Box2D decode_box(const Box2D& anchor, const BoxDelta& d) {
  const double wa = anchor.width();
  const double ha = anchor.height();
  if (!(wa > 0.0 && ha > 0.0)) fail("decode_box: anchor ", anchor, " has non-positive size");
  if (!d.finite()) fail("decode_box: non-finite delta");
  const double sw = std::exp(d.tw);
  const double sh = std::exp(d.th);
  const double w = wa * sw;
  const double h = ha * sh;
  if (!std::isfinite(w) || !std::isfinite(h)) {
    fail("decode_box: size delta (", d.tw, ", ", d.th, ") overflows");
  }
  return Box2D::from_center(anchor.cx() + d.tx * wa, anchor.cy() + d.ty * ha, w, h);
}

inline Box2D clip_box(const Box2D& b, double width, double height) {
  if (!(width > 0.0 && height > 0.0)) fail("clip_box: image size must be positive");
  const double x1 = std::clamp(b.x1, 0.0, width);
  const double y1 = std::clamp(b.y1, 0.0, height);
  return {x1, y1, std::clamp(b.x2, x1, width), std::clamp(b.y2, y1, height)};
}

// Labels follow the image: shrinking the image by sigma divides coordinates
// by sigma.
inline Box2D scale_box(const Box2D& b, double sigma) {
  if (!(sigma > 0.0)) fail("scale_box: sigma must be positive, got ", sigma);
  return {b.x1 / sigma, b.y1 / sigma, b.x2 / sigma, b.y2 / sigma};
}

}  // namespace rpnforge
