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
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

// 8-bit interleaved RGB, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

// Binary PPM (P6) with maxval 255. Header comments are accepted on load;
// save always writes the canonical `P6\n<w> <h>\n255\n` header.
inline Image load_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      const unsigned char c = static_cast<unsigned char>(bytes[pos]);
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(c)) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) -> std::size_t {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 24) fail("ppm: ", what, " too large at byte ", start);
      ++pos;
    }
    if (pos == start) fail("ppm: malformed header, expected ", what, " at byte ", start);
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') fail("ppm: missing P6 magic at byte 0");
  pos = 2;
  const std::size_t w = read_uint("width");
  const std::size_t h = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (maxval != 255) fail("ppm: maxval ", maxval, " unsupported (only 255) at byte ", pos);
  if (w == 0 || h == 0) fail("ppm: zero-sized image");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    fail("ppm: malformed header, expected whitespace after maxval at byte ", pos);
  }
  ++pos;
  const std::size_t need = w * h * 3;
  if (bytes.size() - pos < need) {
    fail("ppm: truncated payload at byte ", bytes.size(), " (expected ", need, " bytes from byte ", pos, ")");
  }
  Image img(w, h);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
            bytes.begin() + static_cast<std::ptrdiff_t>(pos + need), img.rgb.begin());
  return img;
}

inline std::string save_ppm(const Image& img) {
  if (img.rgb.size() != img.width * img.height * 3) fail("ppm: image buffer does not match its size");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(img.rgb.begin(), img.rgb.end());
  return out;
}

struct Preprocessed {
  Tensor tensor;  // [H, W, 3], per-channel zero mean
  double sigma = 1.0;
};

// Uniform shrink so the long side is <= long_max and the short side
// <= short_max (never enlarges), bilinear resampling, then per-channel mean
// subtraction. Labels follow with scale_box(box, sigma).
inline Preprocessed preprocess_image(const Image& img, double long_max = 1000.0, double short_max = 600.0) {
  if (img.width == 0 || img.height == 0) fail("preprocess_image: zero-sized image");
  const double long_side = static_cast<double>(std::max(img.width, img.height));
  const double short_side = static_cast<double>(std::min(img.width, img.height));
  const double sigma = std::max({1.0, long_side / long_max, short_side / short_max});
  const auto out_w = static_cast<std::size_t>(std::max(1.0, std::round(static_cast<double>(img.width) / sigma)));
  const auto out_h = static_cast<std::size_t>(std::max(1.0, std::round(static_cast<double>(img.height) / sigma)));

  Tensor t({out_h, out_w, 3});
  const double max_x = static_cast<double>(img.width - 1);
  const double max_y = static_cast<double>(img.height - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) * sigma - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) * sigma - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1.0 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
        const double bot = (1.0 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
        t.at(y, x, c) = (1.0 - fy) * top + fy * bot;
      }
    }
  }

  const double n = static_cast<double>(out_w * out_h);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t i = c; i < t.size(); i += 3) mean += t[i];
    mean /= n;
    for (std::size_t i = c; i < t.size(); i += 3) t[i] -= mean;
  }
  return {std::move(t), sigma};
}

// Zero-pads an [H, W, C] map at the bottom and right up to multiples of m.
inline Tensor pad_to_multiple(const Tensor& t, std::size_t m) {
  if (t.rank() != 3) fail("pad_to_multiple: expected [H,W,C]");
  const std::size_t H = t.dim(0), W = t.dim(1), C = t.dim(2);
  const std::size_t PH = (H + m - 1) / m * m;
  const std::size_t PW = (W + m - 1) / m * m;
  if (PH == H && PW == W) return t;
  Tensor out({PH, PW, C});
  for (std::size_t y = 0; y < H; ++y) {
    std::copy(t.data() + y * W * C, t.data() + (y + 1) * W * C, out.data() + y * PW * C);
  }
  return out;
}

}  // namespace rpnforge
