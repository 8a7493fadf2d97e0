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
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "rpnforge/checkpoint.hpp"
#include "rpnforge/error.hpp"
#include "rpnforge/image.hpp"
#include "rpnforge/kitti.hpp"

namespace rpnforge {

struct SceneSpec {
  std::size_t width = 160;
  std::size_t height = 128;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t min_size = 16;
  std::size_t max_size = 96;
  double noise = 20.0;  // half-width of the uniform background noise, in gray levels
  std::uint64_t seed = 1;

  void validate() const {
    if (width == 0 || height == 0) fail("scene: image size must be positive");
    if (min_objects > max_objects) fail("scene: min_objects > max_objects");
    if (min_size == 0 || min_size > max_size) fail("scene: need 0 < min_size <= max_size");
    if (max_size > std::min(width, height)) fail("scene: max_size ", max_size, " exceeds the image");
    if (noise < 0.0 || noise > 100.0) fail("scene: noise must be in [0,100]");
  }
};

struct Scene {
  Image image;
  std::vector<KittiLabel> labels;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Filled high-contrast rectangles on a noisy gray background. Objects never
// intersect, so each label's box is exactly the rectangle's pixel extent
// [x1, x1+w) x [y1, y1+h).
inline Scene generate_synthetic_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  auto uniform = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  Scene scene;
  scene.image = Image(spec.width, spec.height);
  const int base = static_cast<int>(uniform(90, 130));
  std::uniform_real_distribution<double> jitter(-spec.noise, spec.noise);
  for (auto& px : scene.image.rgb) {
    px = static_cast<std::uint8_t>(std::clamp(static_cast<int>(std::lround(base + jitter(rng))), 0, 255));
  }

  const std::size_t count = uniform(spec.min_objects, spec.max_objects);
  std::vector<Box2D> placed;
  constexpr int kRetries = 2000;
  for (std::size_t n = 0; n < count; ++n) {
    bool ok = false;
    for (int attempt = 0; attempt < kRetries && !ok; ++attempt) {
      const std::size_t w = uniform(spec.min_size, spec.max_size);
      const std::size_t h = uniform(spec.min_size, spec.max_size);
      const std::size_t x = uniform(0, spec.width - w);
      const std::size_t y = uniform(0, spec.height - h);
      const Box2D box(static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w),
                      static_cast<double>(y + h));
      ok = std::none_of(placed.begin(), placed.end(),
                        [&](const Box2D& other) { return intersection_area(box, other) > 0.0; });
      if (ok) placed.push_back(box);
    }
    if (!ok) {
      fail("scene: could not place object ", n + 1, " of ", count, " without overlap after ", kRetries,
           " tries; request fewer or smaller objects");
    }
  }

  for (const auto& box : placed) {
    const std::uint8_t r = static_cast<std::uint8_t>(uniform(210, 255));
    const std::uint8_t g = static_cast<std::uint8_t>(uniform(20, 70));
    const std::uint8_t b = static_cast<std::uint8_t>(uniform(20, 70));
    for (auto y = static_cast<std::size_t>(box.y1); y < static_cast<std::size_t>(box.y2); ++y) {
      for (auto x = static_cast<std::size_t>(box.x1); x < static_cast<std::size_t>(box.x2); ++x) {
        scene.image.at(x, y, 0) = r;
        scene.image.at(x, y, 1) = g;
        scene.image.at(x, y, 2) = b;
      }
    }
    KittiLabel l;
    l.category = "Car";
    l.truncation = 0.0;
    l.occlusion = 0;
    l.bbox = box;
    scene.labels.push_back(l);
  }
  return scene;
}

inline std::string stem_name(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%06zu", index);
  return buf;
}

// Layout: images/NNNNNN.ppm, labels/NNNNNN.txt, dataset.txt (one stem per line).
inline std::vector<std::string> write_synthetic_dataset(const std::filesystem::path& dir, const SceneSpec& spec,
                                                        std::size_t count) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  std::vector<std::string> stems;
  std::string manifest;
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec s = spec;
    s.seed = mix_seed(spec.seed, i);
    const Scene scene = generate_synthetic_scene(s);
    const std::string stem = stem_name(i);
    write_file_atomic((dir / "images" / (stem + ".ppm")).string(), save_ppm(scene.image));
    write_file_atomic((dir / "labels" / (stem + ".txt")).string(), write_label_file(scene.labels));
    manifest += stem + "\n";
    stems.push_back(stem);
  }
  write_file_atomic((dir / "dataset.txt").string(), manifest);
  return stems;
}

inline std::vector<std::string> read_manifest(const std::filesystem::path& dir) {
  const std::string text = read_file((dir / "dataset.txt").string());
  std::vector<std::string> stems;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) stems.push_back(line);
    pos = end + 1;
  }
  return stems;
}

struct Sample {
  std::string stem;
  Image image;
  std::vector<KittiLabel> labels;
};

inline Sample load_sample(const std::filesystem::path& dir, const std::string& stem) {
  Sample s;
  s.stem = stem;
  const auto img_path = (dir / "images" / (stem + ".ppm")).string();
  const auto lbl_path = (dir / "labels" / (stem + ".txt")).string();
  try {
    s.image = load_ppm(read_file(img_path));
  } catch (const Error& e) {
    fail(img_path, ": ", e.what());
  }
  try {
    s.labels = parse_label_file(read_file(lbl_path));
  } catch (const Error& e) {
    fail(lbl_path, ": ", e.what());
  }
  return s;
}

}  // namespace rpnforge
