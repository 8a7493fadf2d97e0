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
#include <atomic>
#include <cstddef>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "rpnforge/config.hpp"
#include "rpnforge/detector.hpp"
#include "rpnforge/evaluation.hpp"
#include "rpnforge/kitti.hpp"
#include "rpnforge/log.hpp"
#include "rpnforge/optim.hpp"
#include "rpnforge/synthetic.hpp"

namespace rpnforge {

// Stream ids for mix_seed so each consumer of the master seed is independent.
inline constexpr std::uint64_t kInitStream = 101;
inline constexpr std::uint64_t kTrainStream = 202;

struct TrainingSample {
  std::string stem;
  PreparedImage image;
  std::vector<GroundTruthBox> gts;
};

// Ground truths of configured classes, scaled into the preprocessed frame.
// Other categories (DontCare included) are not training targets.
inline std::vector<GroundTruthBox> training_targets(const std::vector<KittiLabel>& labels, const DetectorConfig& cfg,
                                                    double sigma) {
  std::vector<GroundTruthBox> out;
  for (const auto& l : labels) {
    const int c = cfg.class_index(l.category);
    if (c < 1) continue;
    const Box2D b = scale_box(l.bbox, sigma);
    if (b.width() <= 0.0 || b.height() <= 0.0) continue;
    out.push_back({b, static_cast<std::size_t>(c)});
  }
  return out;
}

inline TrainingSample prepare_sample(const Sample& s, const RunConfig& cfg) {
  TrainingSample t;
  t.stem = s.stem;
  t.image = prepare_image(s.image, cfg.model.stride, cfg.long_max, cfg.short_max);
  t.gts = training_targets(s.labels, cfg.model, t.image.sigma);
  return t;
}

inline std::vector<TrainingSample> load_training_set(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::vector<TrainingSample> out;
  for (const auto& stem : read_manifest(dir)) out.push_back(prepare_sample(load_sample(dir, stem), cfg));
  if (out.empty()) fail(dir.string(), ": dataset.txt lists no images");
  return out;
}

inline std::string loss_log_header() { return "step,total,rpn_cls,rpn_reg,det_cls,det_reg\n"; }

inline std::string loss_log_row(std::size_t step, const LossBreakdown& lb) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", step, lb.total, lb.rpn_cls, lb.rpn_reg,
                lb.det_cls, lb.det_reg);
  return buf;
}

// One image per step; images are visited in a fresh random order each epoch.
inline std::vector<LossBreakdown> train_detector(
    Detector& model, const std::vector<TrainingSample>& data, const RunConfig& cfg,
    const std::function<void(std::size_t, const LossBreakdown&)>& on_step = {}) {
  if (data.empty()) fail("train: no training images");
  Rng rng(mix_seed(cfg.seed, kTrainStream));
  Sgd opt({cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay});
  std::vector<std::size_t> order(data.size());
  std::vector<LossBreakdown> history;
  history.reserve(cfg.train.steps);
  for (std::size_t step = 0; step < cfg.train.steps; ++step) {
    const std::size_t slot = step % data.size();
    if (slot == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
    }
    const TrainingSample& s = data[order[slot]];
    opt.options().lr = cfg.lr_at(step);
    LossBreakdown lb;
    try {
      lb = train_step(model, s.image, s.gts, opt, rng);
    } catch (const Error& e) {
      fail("step ", step, " (image ", s.stem, "): ", e.what());
    }
    history.push_back(lb);
    if (on_step) on_step(step, lb);
    if (cfg.train.log_every > 0 && (step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps)) {
      log(LogLevel::Info, "step ", step, " loss ", lb.total, " (rpn ", lb.rpn_cls, "+", lb.rpn_reg, ", det ",
          lb.det_cls, "+", lb.det_reg, ")");
    }
  }
  return history;
}

inline Detector make_detector(const RunConfig& cfg) { return Detector(cfg.model, mix_seed(cfg.seed, kInitStream)); }

inline std::vector<KittiLabel> to_kitti(const std::vector<ScoredBox>& dets, const DetectorConfig& cfg) {
  std::vector<KittiLabel> out;
  for (const auto& d : dets) out.push_back(make_detection(cfg.classes.at(static_cast<std::size_t>(d.class_id)), d.box, d.score));
  return out;
}

inline std::vector<KittiLabel> detect_image(Detector& model, const Image& img, const RunConfig& cfg) {
  const PreparedImage p = prepare_image(img, cfg.model.stride, cfg.long_max, cfg.short_max);
  return to_kitti(detect(model, p, cfg.score_thresh), model.config());
}

// Runs detect over `images` on cfg.jobs threads. Each worker owns a copy of
// the model, since layers cache activations during forward.
inline LabelsByImage detect_many(const Detector& model, const std::vector<std::pair<std::string, Image>>& images,
                                 const RunConfig& cfg) {
  LabelsByImage out;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.jobs, images.size()));
  auto work = [&] {
    Detector local = model;
    for (std::size_t i = next++; i < images.size(); i = next++) {
      try {
        auto dets = detect_image(local, images[i].second, cfg);
        std::lock_guard<std::mutex> lock(mu);
        out[images[i].first] = std::move(dets);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
        next = images.size();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

inline LabelsByImage load_dataset_labels(const std::filesystem::path& dir) {
  LabelsByImage out;
  for (const auto& stem : read_manifest(dir)) {
    const auto path = (dir / "labels" / (stem + ".txt")).string();
    try {
      out[stem] = parse_label_file(read_file(path));
    } catch (const Error& e) {
      fail(path, ": ", e.what());
    }
  }
  return out;
}

// Every <stem>.txt in `dir`; an image without a file simply has no detections.
inline LabelsByImage load_detection_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) fail(dir.string(), ": not a directory");
  LabelsByImage out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    const auto path = entry.path().string();
    try {
      out[entry.path().stem().string()] = parse_label_file(read_file(path));
    } catch (const Error& e) {
      fail(path, ": ", e.what());
    }
  }
  return out;
}

inline EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.levels = cfg.eval_levels;
  o.threshold_step = cfg.eval_threshold_step;
  if (cfg.eval_iou > 0.0) {
    for (const auto& c : cfg.object_classes()) o.iou_thresh[c] = cfg.eval_iou;
  }
  return o;
}

inline void write_report(const std::filesystem::path& dir, const EmittedReport& rep) {
  std::filesystem::create_directories(dir);
  write_file_atomic((dir / "report.csv").string(), rep.csv);
  write_file_atomic((dir / "report.json").string(), rep.json);
  for (const auto& [name, text] : rep.pr_files) write_file_atomic((dir / name).string(), text);
}

}  // namespace rpnforge
