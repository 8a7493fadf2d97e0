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
#include <array>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/geometry.hpp"

namespace rpnforge {

// One object in the 15-column KITTI label layout (16 with a detection
// score):
//   type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y [score]
// Truncation and occlusion may be -1 (unknown), as KITTI writes for
// DontCare regions and for many detection files.
struct KittiLabel {
  std::string category;
  double truncation = 0.0;
  int occlusion = 0;
  double alpha = -10.0;
  Box2D bbox;
  std::array<double, 3> dimensions{-1.0, -1.0, -1.0};
  std::array<double, 3> location{-1000.0, -1000.0, -1000.0};
  double rotation_y = -10.0;
  std::optional<double> score;

  friend bool operator==(const KittiLabel&, const KittiLabel&) = default;
};

enum class Difficulty { Easy = 0, Moderate = 1, Hard = 2, Ignored = 3 };

inline const char* to_string(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "Easy";
    case Difficulty::Moderate: return "Moderate";
    case Difficulty::Hard: return "Hard";
    case Difficulty::Ignored: return "Ignored";
  }
  return "?";
}

inline Difficulty parse_difficulty(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "easy") return Difficulty::Easy;
  if (lower == "moderate") return Difficulty::Moderate;
  if (lower == "hard") return Difficulty::Hard;
  fail("unknown difficulty '", s, "' (expected easy, moderate or hard)");
}

// Thresholds are inclusive. Unknown occlusion (-1 or 3) and unknown
// truncation are Ignored at every level.
inline Difficulty classify_difficulty(const KittiLabel& label) {
  const double h = label.bbox.height();
  const int occ = label.occlusion;
  const double trunc = label.truncation;
  if (occ < 0 || occ > 2 || trunc < 0.0) return Difficulty::Ignored;
  if (h >= 40.0 && occ == 0 && trunc <= 0.15) return Difficulty::Easy;
  if (h >= 25.0 && occ <= 1 && trunc <= 0.30) return Difficulty::Moderate;
  if (h >= 25.0 && occ <= 2 && trunc <= 0.50) return Difficulty::Hard;
  return Difficulty::Ignored;
}

// True when a ground truth of difficulty `d` counts at evaluation level `level`.
inline bool eligible_at(Difficulty d, Difficulty level) {
  return d != Difficulty::Ignored && static_cast<int>(d) <= static_cast<int>(level);
}

namespace detail {

inline double parse_number(std::string_view tok, std::size_t line_no, const char* field) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (!tok.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    fail("line ", line_no, ": field '", field, "' is not a number: '", tok, "'");
  }
  return v;
}

}  // namespace detail

inline KittiLabel parse_label_line(std::string_view line, std::size_t line_no) {
  std::vector<std::string_view> tok;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) tok.push_back(line.substr(start, i - start));
  }
  if (tok.size() != 15 && tok.size() != 16) {
    fail("line ", line_no, ": expected 15 or 16 columns, got ", tok.size());
  }
  using detail::parse_number;
  KittiLabel l;
  l.category = std::string(tok[0]);
  l.truncation = parse_number(tok[1], line_no, "truncated");
  const double occ = parse_number(tok[2], line_no, "occluded");
  if (occ != static_cast<int>(occ)) fail("line ", line_no, ": occlusion must be an integer");
  l.occlusion = static_cast<int>(occ);
  l.alpha = parse_number(tok[3], line_no, "alpha");
  l.bbox = {parse_number(tok[4], line_no, "x1"), parse_number(tok[5], line_no, "y1"),
            parse_number(tok[6], line_no, "x2"), parse_number(tok[7], line_no, "y2")};
  l.dimensions = {parse_number(tok[8], line_no, "height"), parse_number(tok[9], line_no, "width"),
                  parse_number(tok[10], line_no, "length")};
  l.location = {parse_number(tok[11], line_no, "x"), parse_number(tok[12], line_no, "y"),
                parse_number(tok[13], line_no, "z")};
  l.rotation_y = parse_number(tok[14], line_no, "rotation_y");
  if (tok.size() == 16) l.score = parse_number(tok[15], line_no, "score");

  if (!l.bbox.valid()) fail("line ", line_no, ": invalid bbox (need x1<=x2, y1<=y2)");
  if (!((l.truncation >= 0.0 && l.truncation <= 1.0) || l.truncation == -1.0)) {
    fail("line ", line_no, ": truncation ", l.truncation, " outside [0,1]");
  }
  if (l.occlusion < -1 || l.occlusion > 3) fail("line ", line_no, ": occlusion ", l.occlusion, " outside 0..3");
  return l;
}

inline std::vector<KittiLabel> parse_label_file(std::string_view text) {
  std::vector<KittiLabel> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos) out.push_back(parse_label_line(line, line_no));
    pos = end + 1;
  }
  return out;
}

inline std::string format_label(const KittiLabel& l) {
  char buf[512];
  int n = std::snprintf(buf, sizeof(buf), "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f",
                        l.category.c_str(), l.truncation, l.occlusion, l.alpha, l.bbox.x1, l.bbox.y1, l.bbox.x2,
                        l.bbox.y2, l.dimensions[0], l.dimensions[1], l.dimensions[2], l.location[0],
                        l.location[1], l.location[2], l.rotation_y);
  std::string s(buf, static_cast<std::size_t>(n));
  if (l.score) {
    std::snprintf(buf, sizeof(buf), " %.6f", *l.score);
    s += buf;
  }
  return s;
}

// Ground-truth style: records written in input order, scores included when present.
inline std::string write_label_file(const std::vector<KittiLabel>& labels) {
  std::string out;
  for (const auto& l : labels) {
    out += format_label(l);
    out += '\n';
  }
  return out;
}

// Results style: every record must carry a score; sorted by descending
// score, stable.
inline std::string write_detections(std::vector<KittiLabel> dets) {
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (!dets[i].score) fail("write_detections: detection ", i, " (", dets[i].category, ") has no score");
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const KittiLabel& a, const KittiLabel& b) { return *a.score > *b.score; });
  return write_label_file(dets);
}

inline KittiLabel make_detection(std::string category, const Box2D& box, double score) {
  KittiLabel l;
  l.category = std::move(category);
  l.truncation = -1.0;
  l.occlusion = -1;
  l.bbox = box;
  l.score = score;
  return l;
}

}  // namespace rpnforge
