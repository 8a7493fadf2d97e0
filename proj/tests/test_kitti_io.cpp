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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "test_support.hpp"

using namespace rpnforge;

namespace {

const char* kCarLine = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.67 25.01 -1.59";

KittiLabel label_with(double height, int occ, double trunc) {
  KittiLabel l;
  l.category = "Car";
  l.bbox = {0, 0, 10, height};
  l.occlusion = occ;
  l.truncation = trunc;
  return l;
}

// Bounding boxes of 4-connected uniformly colored red regions. Objects may
// touch, but each has its own color.
std::vector<Box2D> scan_objects(const Image& img) {
  std::vector<int> seen(img.width * img.height, 0);
  auto is_obj = [&](std::size_t x, std::size_t y) { return img.at(x, y, 0) >= 200 && img.at(x, y, 1) < 80; };
  auto same_color = [&](std::size_t x, std::size_t y, std::size_t u, std::size_t v) {
    for (std::size_t c = 0; c < 3; ++c)
      if (img.at(x, y, c) != img.at(u, v, c)) return false;
    return true;
  };
  std::vector<Box2D> out;
  for (std::size_t y0 = 0; y0 < img.height; ++y0)
    for (std::size_t x0 = 0; x0 < img.width; ++x0) {
      if (seen[y0 * img.width + x0] || !is_obj(x0, y0)) continue;
      std::vector<std::pair<std::size_t, std::size_t>> stack{{x0, y0}};
      seen[y0 * img.width + x0] = 1;
      Box2D b{double(x0), double(y0), double(x0 + 1), double(y0 + 1)};
      while (!stack.empty()) {
        auto [x, y] = stack.back();
        stack.pop_back();
        b = {std::min(b.x1, double(x)), std::min(b.y1, double(y)), std::max(b.x2, double(x + 1)),
             std::max(b.y2, double(y + 1))};
        const std::pair<long, long> nb[] = {{long(x) - 1, long(y)}, {long(x) + 1, long(y)},
                                            {long(x), long(y) - 1}, {long(x), long(y) + 1}};
        for (auto [nx, ny] : nb) {
          if (nx < 0 || ny < 0 || nx >= long(img.width) || ny >= long(img.height)) continue;
          if (seen[ny * long(img.width) + nx] || !is_obj(nx, ny)) continue;
          if (!same_color(x, y, std::size_t(nx), std::size_t(ny))) continue;
          seen[ny * long(img.width) + nx] = 1;
          stack.push_back({std::size_t(nx), std::size_t(ny)});
        }
      }
      out.push_back(b);
    }
  return out;
}

bool box_less(const Box2D& a, const Box2D& b) {
  return std::tie(a.x1, a.y1, a.x2, a.y2) < std::tie(b.x1, b.y1, b.x2, b.y2);
}

}  // namespace

TEST(KittiLabels, ParseFieldPositions) {
  const auto labels = parse_label_file(kCarLine);
  ASSERT_EQ(labels.size(), 1u);
  const auto& l = labels[0];
  EXPECT_EQ(l.category, "Car");
  EXPECT_EQ(l.bbox, Box2D(587.01, 173.33, 614.12, 200.12));
  EXPECT_EQ(l.alpha, -1.58);
  EXPECT_EQ(l.dimensions[2], 3.64);
  EXPECT_EQ(l.location[2], 25.01);
  EXPECT_EQ(l.rotation_y, -1.59);
  EXPECT_FALSE(l.score.has_value());
  EXPECT_TRUE(parse_label_file("").empty());
  EXPECT_TRUE(parse_label_file("\n  \n").empty());
}

TEST(KittiLabels, CanonicalRoundTripIsByteIdentical) {
  const std::string text = std::string(kCarLine) + "\n" +
                           "Pedestrian 0.30 2 0.25 10.00 20.00 30.50 90.75 1.80 0.60 0.90 1.00 2.00 3.00 0.10\n"
                           "DontCare -1.00 -1 -10.00 0.00 0.00 5.00 5.00 -1.00 -1.00 -1.00 -1000.00 -1000.00 "
                           "-1000.00 -10.00\n"
                           "Tram 0.00 3 1.00 1.00 1.00 2.00 2.00 1.00 1.00 1.00 1.00 1.00 1.00 1.00 0.912345\n";
  EXPECT_EQ(write_label_file(parse_label_file(text)), text);
  const auto parsed = parse_label_file(text);
  EXPECT_EQ(parse_label_file(write_label_file(parsed)), parsed);
  EXPECT_EQ(parsed[3].category, "Tram");
  EXPECT_DOUBLE_EQ(*parsed[3].score, 0.912345);
}

TEST(KittiLabels, ErrorsCarryLineNumbers) {
  auto message = [](const std::string& text) {
    try {
      parse_label_file(text);
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(std::string(kCarLine) + "\nCar 0 0 0 1 2 3\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("Car 0.00 0 -1.58 abc 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.67 25.01 -1.59")
                .find("line 1"),
            std::string::npos);
  EXPECT_THROW(parse_label_file("Car 0.00 0 0 10 0 5 5 1 1 1 1 1 1 1"), Error);    // x1 > x2
  EXPECT_THROW(parse_label_file("Car 1.50 0 0 0 0 5 5 1 1 1 1 1 1 1"), Error);     // truncation
  EXPECT_THROW(parse_label_file("Car 0.00 7 0 0 0 5 5 1 1 1 1 1 1 1"), Error);     // occlusion
  EXPECT_THROW(parse_label_file("Car 0.00 0.5 0 0 0 5 5 1 1 1 1 1 1 1"), Error);   // fractional occlusion
}

TEST(KittiDetections, WriteSortedRequiresScores) {
  EXPECT_EQ(write_detections({}), "");
  const auto a = make_detection("Car", {1, 2, 3, 4}, 0.25);
  const auto b = make_detection("Car", {5, 6, 7, 8}, 0.75);
  const auto c = make_detection("Van", {0, 0, 1, 1}, 0.25);
  const auto parsed = parse_label_file(write_detections({a, b, c}));
  ASSERT_EQ(parsed.size(), 3u);
  EXPECT_EQ(parsed[0], b);
  EXPECT_EQ(parsed[1], a);
  EXPECT_EQ(parsed[2], c);
  KittiLabel unscored = a;
  unscored.score.reset();
  EXPECT_THROW(write_detections({a, unscored}), Error);
  EXPECT_EQ(parse_label_file(write_detections({a})), std::vector<KittiLabel>{a});
}

TEST(Difficulty, TableExamples) {
  EXPECT_EQ(classify_difficulty(label_with(45, 0, 0.10)), Difficulty::Easy);
  EXPECT_EQ(classify_difficulty(label_with(30, 1, 0.25)), Difficulty::Moderate);
  EXPECT_EQ(classify_difficulty(label_with(30, 2, 0.45)), Difficulty::Hard);
  for (int occ = 0; occ <= 3; ++occ) EXPECT_EQ(classify_difficulty(label_with(20, occ, 0.0)), Difficulty::Ignored);
  EXPECT_EQ(classify_difficulty(label_with(100, 3, 0.0)), Difficulty::Ignored);
  // Inclusive boundaries.
  EXPECT_EQ(classify_difficulty(label_with(40, 0, 0.15)), Difficulty::Easy);
  EXPECT_EQ(classify_difficulty(label_with(25, 1, 0.30)), Difficulty::Moderate);
  EXPECT_EQ(classify_difficulty(label_with(25, 2, 0.50)), Difficulty::Hard);
  EXPECT_EQ(classify_difficulty(label_with(25, 2, 0.51)), Difficulty::Ignored);
}

TEST(Difficulty, MonotoneUnderRelaxation) {
  auto rank = [](Difficulty d) { return static_cast<int>(d); };
  const double heights[] = {10, 24.9, 25, 30, 39.9, 40, 80};
  const double truncs[] = {0.0, 0.15, 0.2, 0.3, 0.4, 0.5, 0.8};
  for (double h : heights)
    for (int occ = 0; occ <= 3; ++occ)
      for (double t : truncs) {
        const int here = rank(classify_difficulty(label_with(h, occ, t)));
        EXPECT_LE(rank(classify_difficulty(label_with(h + 20, occ, t))), here);
        if (occ > 0) {
          EXPECT_LE(rank(classify_difficulty(label_with(h, occ - 1, t))), here);
        }
        if (t >= 0.1) {
          EXPECT_LE(rank(classify_difficulty(label_with(h, occ, t - 0.1))), here);
        }
      }
  EXPECT_TRUE(eligible_at(Difficulty::Easy, Difficulty::Moderate));
  EXPECT_FALSE(eligible_at(Difficulty::Hard, Difficulty::Moderate));
  EXPECT_FALSE(eligible_at(Difficulty::Ignored, Difficulty::Hard));
}

TEST(Ppm, WhitePixelBytes) {
  Image img(1, 1, 255);
  const std::string bytes = save_ppm(img);
  EXPECT_EQ(bytes.size(), 14u);
  EXPECT_EQ(bytes, std::string("P6\n1 1\n255\n\xff\xff\xff", 14));
  EXPECT_EQ(load_ppm(bytes), img);
}

TEST(Ppm, RoundTripAndComments) {
  std::mt19937_64 rng(4);
  Image img(7, 5);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng());
  const std::string bytes = save_ppm(img);
  EXPECT_EQ(save_ppm(load_ppm(bytes)), bytes);
  const std::string commented = "P6\n# comment\n7 5\n255\n" + bytes.substr(bytes.size() - 105);
  EXPECT_EQ(load_ppm(commented), img);
}

TEST(Ppm, RejectsMalformed) {
  auto offset_error = [](const std::string& b) {
    try {
      load_ppm(b);
    } catch (const Error& e) {
      return std::string(e.what()).find("byte") != std::string::npos;
    }
    return false;
  };
  EXPECT_TRUE(offset_error("P3\n1 1\n255\n"));
  EXPECT_TRUE(offset_error("P6\n1 1\n65535\n\x01\x02\x03\x04\x05\x06"));
  EXPECT_TRUE(offset_error("P6\n2 2\n255\n\x01\x02"));
  EXPECT_TRUE(offset_error("P6\nx 2\n255\n"));
  EXPECT_THROW(load_ppm("P6\n0 2\n255\n"), Error);
}

TEST(Preprocess, KittiSizeScale) {
  Image img(1242, 375);
  std::mt19937_64 rng(5);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng());
  const auto p = preprocess_image(img);
  EXPECT_EQ(p.sigma, 1.242);
  EXPECT_EQ(p.tensor.shape(), (Shape{302, 1000, 3}));
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0;
    for (std::size_t i = c; i < p.tensor.size(); i += 3) m += p.tensor[i];
    EXPECT_LE(std::abs(m / (302.0 * 1000.0)), 1e-9);
  }
}

TEST(Preprocess, SmallImageUnscaledAndShortSideLimit) {
  Image img(160, 128);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i % 251);
  const auto p = preprocess_image(img);
  EXPECT_EQ(p.sigma, 1.0);
  EXPECT_EQ(p.tensor.shape(), (Shape{128, 160, 3}));
  // With sigma 1 the resample is exact: values differ from the source only by the channel mean.
  const double d0 = p.tensor[0] - img.rgb[0];
  for (std::size_t i = 0; i < 3 * 50; i += 3) EXPECT_NEAR(p.tensor[i] - img.rgb[i], d0, 1e-9);

  const auto q = preprocess_image(Image(900, 900));
  EXPECT_DOUBLE_EQ(q.sigma, 1.5);
  EXPECT_EQ(q.tensor.shape(), (Shape{600, 600, 3}));
  EXPECT_THROW(preprocess_image(Image(0, 3)), Error);
}

TEST(Preprocess, PadToStride) {
  const Tensor t({5, 7, 2}, 1.0);
  const Tensor p = pad_to_multiple(t, 4);
  EXPECT_EQ(p.shape(), (Shape{8, 8, 2}));
  EXPECT_EQ(p.at(4, 6, 1), 1.0);
  EXPECT_EQ(p.at(5, 0, 0), 0.0);
  EXPECT_EQ(p.at(0, 7, 0), 0.0);
}

TEST(Synthetic, DeterministicAndPixelExact) {
  SceneSpec spec;
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    spec.seed = seed;
    const Scene a = generate_synthetic_scene(spec);
    const Scene b = generate_synthetic_scene(spec);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.labels, b.labels);
    std::vector<Box2D> want;
    for (const auto& l : a.labels) {
      EXPECT_EQ(l.occlusion, 0);
      EXPECT_EQ(l.truncation, 0.0);
      want.push_back(l.bbox);
    }
    auto got = scan_objects(a.image);
    std::sort(got.begin(), got.end(), box_less);
    std::sort(want.begin(), want.end(), box_less);
    EXPECT_EQ(got, want) << "seed " << seed;
    for (std::size_t i = 0; i < want.size(); ++i)
      for (std::size_t j = i + 1; j < want.size(); ++j) EXPECT_LE(iou(want[i], want[j]), 0.1);
  }
}

TEST(Synthetic, CountRangeAndErrors) {
  SceneSpec spec;
  spec.min_objects = spec.max_objects = 1;
  EXPECT_EQ(generate_synthetic_scene(spec).labels.size(), 1u);
  spec.min_objects = spec.max_objects = 40;
  spec.min_size = 60;
  spec.max_size = 90;
  try {
    generate_synthetic_scene(spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("fewer or smaller"), std::string::npos);
  }
  SceneSpec bad;
  bad.max_size = 500;
  EXPECT_THROW(generate_synthetic_scene(bad), Error);
}

TEST(Synthetic, DatasetLayout) {
  const auto dir = std::filesystem::temp_directory_path() / "rpnforge_test_layout";
  std::filesystem::remove_all(dir);
  SceneSpec spec;
  spec.seed = 9;
  const auto stems = write_synthetic_dataset(dir, spec, 3);
  EXPECT_EQ(stems, (std::vector<std::string>{"000000", "000001", "000002"}));
  EXPECT_EQ(read_manifest(dir), stems);
  const Sample s = load_sample(dir, "000001");
  spec.seed = mix_seed(9, 1);
  const Scene direct = generate_synthetic_scene(spec);
  EXPECT_EQ(s.image, direct.image);
  EXPECT_EQ(s.labels, direct.labels);
  EXPECT_THROW(load_sample(dir, "000009"), Error);

  const auto empty = std::filesystem::temp_directory_path() / "rpnforge_test_empty";
  std::filesystem::remove_all(empty);
  EXPECT_TRUE(write_synthetic_dataset(empty, spec, 0).empty());
  EXPECT_TRUE(std::filesystem::exists(empty / "dataset.txt"));
  EXPECT_TRUE(read_manifest(empty).empty());
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(empty);
}
