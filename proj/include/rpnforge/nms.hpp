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
#include <cstddef>
#include <map>
#include <vector>

#include "rpnforge/geometry.hpp"

namespace rpnforge {

struct ScoredBox {
  Box2D box;
  double score = 0.0;
  int class_id = 0;
  std::size_t source_index = 0;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

// Descending score, ascending source_index on ties.
inline bool score_order(const ScoredBox& a, const ScoredBox& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.source_index < b.source_index;
}

// Greedy NMS: take the best remaining box, drop everything overlapping it
// by strictly more than n_t, repeat.
inline std::vector<ScoredBox> greedy_nms(std::vector<ScoredBox> dets, double n_t) {
  if (!(n_t >= 0.0 && n_t < 1.0)) fail("greedy_nms: threshold must be in [0,1), got ", n_t);
  std::stable_sort(dets.begin(), dets.end(), score_order);
  std::vector<ScoredBox> kept;
  std::vector<bool> removed(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (!removed[j] && iou(dets[i].box, dets[j].box) > n_t) removed[j] = true;
    }
  }
  return kept;
}

inline std::vector<ScoredBox> per_class_nms(const std::vector<ScoredBox>& dets, double n_t) {
  std::map<int, std::vector<ScoredBox>> by_class;
  for (const auto& d : dets) by_class[d.class_id].push_back(d);
  std::vector<ScoredBox> out;
  for (auto& [cls, group] : by_class) {
    auto kept = greedy_nms(std::move(group), n_t);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  std::stable_sort(out.begin(), out.end(), score_order);
  return out;
}

}  // namespace rpnforge
