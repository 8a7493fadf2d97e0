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
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rpnforge/error.hpp"
#include "rpnforge/geometry.hpp"
#include "rpnforge/kitti.hpp"
#include "rpnforge/nms.hpp"

namespace rpnforge {

enum class MatchOutcome { TruePositive, FalsePositive, IgnoredMatch };

struct GroundTruth {
  Box2D box;
  Difficulty difficulty = Difficulty::Easy;
};

struct EvalConfig {
  double iou_thresh = 0.7;
  Difficulty difficulty = Difficulty::Moderate;
  double threshold_step = 0.05;

  std::vector<double> thresholds() const {
    const double n = std::round(1.0 / threshold_step);
    if (!(threshold_step > 0.0) || std::abs(n * threshold_step - 1.0) > 1e-9) {
      fail("eval: threshold step ", threshold_step, " does not divide [0,1] exactly");
    }
    const auto count = static_cast<std::size_t>(n);
    std::vector<double> t(count + 1);
    for (std::size_t i = 0; i <= count; ++i) t[i] = static_cast<double>(count - i) / n;
    return t;
  }
};

// KITTI convention: 0.7 for cars, 0.5 for everything else.
inline double default_iou_thresh(const std::string& category) { return category == "Car" ? 0.7 : 0.5; }

struct ScoredOutcome {
  double score = 0.0;
  MatchOutcome outcome = MatchOutcome::FalsePositive;
};

// Outcomes are aligned with the input detection order.
struct MatchResult {
  std::vector<ScoredOutcome> outcomes;
  std::vector<bool> gt_matched;
  std::size_t num_eligible = 0;

  // Pooling is concatenation; it commutes with per-threshold counting.
  void pool(const MatchResult& other) {
    outcomes.insert(outcomes.end(), other.outcomes.begin(), other.outcomes.end());
    gt_matched.insert(gt_matched.end(), other.gt_matched.begin(), other.gt_matched.end());
    num_eligible += other.num_eligible;
  }
};

// Detections claim ground truths in descending score order. A detection
// takes the unmatched eligible ground truth it overlaps most (IoU >=
// threshold). Failing that, overlapping a neutral ground truth (harder than
// the evaluated level, or Ignored) makes it neither TP nor FP.
inline MatchResult match_detections(const std::vector<ScoredBox>& dets, const std::vector<GroundTruth>& gts,
                                    const EvalConfig& cfg) {
  MatchResult r;
  r.outcomes.resize(dets.size());
  r.gt_matched.assign(gts.size(), false);
  std::vector<bool> eligible(gts.size());
  for (std::size_t j = 0; j < gts.size(); ++j) {
    eligible[j] = eligible_at(gts[j].difficulty, cfg.difficulty);
    if (eligible[j]) ++r.num_eligible;
  }

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score_order(dets[a], dets[b]); });

  for (std::size_t i : order) {
    const ScoredBox& d = dets[i];
    double best = -1.0;
    std::size_t best_j = 0;
    bool neutral_hit = false;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(d.box, gts[j].box);
      if (v < cfg.iou_thresh) continue;
      if (!eligible[j]) {
        neutral_hit = true;
      } else if (!r.gt_matched[j] && v > best) {
        best = v;
        best_j = j;
      }
    }
    MatchOutcome out = MatchOutcome::FalsePositive;
    if (best >= 0.0) {
      r.gt_matched[best_j] = true;
      out = MatchOutcome::TruePositive;
    } else if (neutral_hit) {
      out = MatchOutcome::IgnoredMatch;
    }
    r.outcomes[i] = {d.score, out};
  }
  return r;
}

// tn is not defined for detection and stays 0.
struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion_at_threshold(const MatchResult& r, double score_t) {
  ConfusionCounts c;
  for (const auto& o : r.outcomes) {
    if (o.score < score_t) continue;
    if (o.outcome == MatchOutcome::TruePositive) ++c.tp;
    else if (o.outcome == MatchOutcome::FalsePositive) ++c.fp;
  }
  c.fn = r.num_eligible - c.tp;
  return c;
}

struct PrecisionRecall {
  double precision = 1.0;
  double recall = 0.0;
};

// 0/0 precision is 1 (no claims made), 0/0 recall is 0.
inline PrecisionRecall precision_recall(const ConfusionCounts& c) {
  PrecisionRecall pr;
  if (c.tp + c.fp > 0) pr.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) pr.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return pr;
}

struct PRPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
};

// Ordered by decreasing threshold, so recall is non-decreasing.
struct PRCurve {
  std::vector<PRPoint> points;
};

inline PRCurve pr_curve(const MatchResult& r, const EvalConfig& cfg) {
  PRCurve curve;
  for (double t : cfg.thresholds()) {
    const auto pr = precision_recall(confusion_at_threshold(r, t));
    curve.points.push_back({t, pr.precision, pr.recall});
  }
  return curve;
}

// Area under the monotone precision envelope (running max from the
// high-recall end), summed over recall increments starting at recall 0.
inline double average_precision(const PRCurve& curve) {
  const auto& pts = curve.points;
  std::vector<double> env(pts.size());
  double running = 0.0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    running = std::max(running, pts[i].precision);
    env[i] = running;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ap += env[i] * (pts[i].recall - prev_recall);
    prev_recall = pts[i].recall;
  }
  return std::clamp(ap, 0.0, 1.0);
}

struct EvalEntry {
  std::string category;
  Difficulty difficulty = Difficulty::Moderate;
  double iou_thresh = 0.5;
  double ap = 0.0;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  PRCurve curve;
};

struct EvalReport {
  std::vector<EvalEntry> entries;
  std::map<std::string, std::string> provenance;
};

struct EvalOptions {
  std::map<std::string, double> iou_thresh;  // per class; missing classes use default_iou_thresh
  std::vector<Difficulty> levels{Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard};
  double threshold_step = 0.05;
  std::map<std::string, std::string> provenance;
};

using LabelsByImage = std::map<std::string, std::vector<KittiLabel>>;

// Per class and level: match every image separately, pool the outcomes,
// then sweep. DontCare ground truths are neutral for every class.
inline EvalReport evaluate_dataset(const LabelsByImage& dets, const LabelsByImage& gts,
                                   std::vector<std::string> classes, const EvalOptions& opts = {}) {
  for (const auto& [key, _] : dets) {
    if (!gts.count(key)) fail("evaluate: detections for image '", key, "' have no ground truth");
  }
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::set<std::string> known(classes.begin(), classes.end());
  std::set<std::string> unknown;
  for (const auto& [key, list] : dets) {
    for (const auto& d : list) {
      if (!known.count(d.category)) unknown.insert(d.category);
      if (!d.score) fail("evaluate: detection of '", d.category, "' in image '", key, "' has no score");
    }
  }
  if (!unknown.empty()) {
    std::string names;
    for (const auto& n : unknown) names += (names.empty() ? "" : ", ") + n;
    fail("evaluate: unknown class name(s) in detections: ", names);
  }

  EvalReport report;
  report.provenance = opts.provenance;
  std::vector<Difficulty> levels = opts.levels;
  std::sort(levels.begin(), levels.end());
  for (const auto& cls : classes) {
    const auto it = opts.iou_thresh.find(cls);
    const double thresh = it != opts.iou_thresh.end() ? it->second : default_iou_thresh(cls);
    for (Difficulty level : levels) {
      EvalConfig cfg{thresh, level, opts.threshold_step};
      MatchResult pooled;
      std::size_t num_det = 0;
      for (const auto& [key, gt_list] : gts) {
        std::vector<GroundTruth> g;
        for (const auto& l : gt_list) {
          if (l.category == cls) g.push_back({l.bbox, classify_difficulty(l)});
          else if (l.category == "DontCare") g.push_back({l.bbox, Difficulty::Ignored});
        }
        std::vector<ScoredBox> d;
        if (const auto dit = dets.find(key); dit != dets.end()) {
          for (std::size_t i = 0; i < dit->second.size(); ++i) {
            const auto& l = dit->second[i];
            if (l.category == cls) d.push_back({l.bbox, *l.score, 0, i});
          }
        }
        num_det += d.size();
        pooled.pool(match_detections(d, g, cfg));
      }
      EvalEntry e;
      e.category = cls;
      e.difficulty = level;
      e.iou_thresh = thresh;
      e.curve = pr_curve(pooled, cfg);
      e.ap = average_precision(e.curve);
      e.num_gt = pooled.num_eligible;
      e.num_det = num_det;
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

struct EmittedReport {
  std::string csv;
  std::string json;
  std::map<std::string, std::string> pr_files;  // file name -> contents
};

inline std::string pr_file_name(const EvalEntry& e) {
  return "pr_" + e.category + "_" + to_string(e.difficulty) + ".csv";
}

inline EmittedReport emit_report(const EvalReport& report) {
  std::vector<const EvalEntry*> sorted;
  for (const auto& e : report.entries) sorted.push_back(&e);
  std::stable_sort(sorted.begin(), sorted.end(), [](const EvalEntry* a, const EvalEntry* b) {
    if (a->category != b->category) return a->category < b->category;
    return a->difficulty < b->difficulty;
  });

  EmittedReport out;
  out.csv = "class,difficulty,iou_thresh,AP,num_gt,num_det\n";
  nlohmann::ordered_json j;
  j["provenance"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : report.provenance) j["provenance"][k] = v;
  j["results"] = nlohmann::ordered_json::array();
  char buf[256];
  for (const EvalEntry* e : sorted) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.2f,%.6f,%zu,%zu\n", e->category.c_str(), to_string(e->difficulty),
                  e->iou_thresh, e->ap, e->num_gt, e->num_det);
    out.csv += buf;

    std::string pr = "threshold,precision,recall\n";
    nlohmann::ordered_json pts = nlohmann::ordered_json::array();
    for (const auto& p : e->curve.points) {
      std::snprintf(buf, sizeof(buf), "%.2f,%.6f,%.6f\n", p.threshold, p.precision, p.recall);
      pr += buf;
      pts.push_back({p.threshold, p.precision, p.recall});
    }
    out.pr_files[pr_file_name(*e)] = std::move(pr);

    nlohmann::ordered_json row;
    row["class"] = e->category;
    row["difficulty"] = to_string(e->difficulty);
    row["iou_thresh"] = e->iou_thresh;
    row["AP"] = e->ap;
    row["num_gt"] = e->num_gt;
    row["num_det"] = e->num_det;
    row["pr_curve"] = std::move(pts);
    j["results"].push_back(std::move(row));
  }
  out.json = j.dump(2) + "\n";
  return out;
}

}  // namespace rpnforge
