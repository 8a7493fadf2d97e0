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

// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset. Exit status is non-zero if any line fails.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include "oracles.hpp"

using namespace rpnforge;
using namespace rpnforge::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string format(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rpnforge_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double tail_mean(const std::vector<LossBreakdown>& h, std::size_t n) {
  n = std::min(n, h.size());
  double s = 0;
  for (std::size_t i = h.size() - n; i < h.size(); ++i) s += h[i].total;
  return s / double(n);
}

std::vector<std::pair<std::string, Image>> dataset_images(const fs::path& dir) {
  std::vector<std::pair<std::string, Image>> out;
  for (const auto& stem : read_manifest(dir)) out.emplace_back(stem, load_sample(dir, stem).image);
  return out;
}

Outcome gradients() {
  GradCheckOptions opts;
  opts.seeds = 10;
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(opts);
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0;
  double worst_op = 0, e2e = 0;
  std::string failed;
  for (const auto& r : results) {
    const double tol = r.name == "end_to_end" ? 1e-5 : 1e-6;
    if (!(r.passed() && r.max_error < tol && r.seeds >= 10)) {
      ok = false;
      failed += " " + r.name;
    }
    double& slot = r.name == "end_to_end" ? e2e : worst_op;
    slot = std::max(slot, r.max_error);
  }
  return {ok, format("%zu cases x 10 seeds, worst op %.2e, end-to-end %.2e, %.1f s%s", results.size(), worst_op, e2e,
                     secs, failed.empty() ? "" : (" failed:" + failed).c_str())};
}

Outcome nms_oracle() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> thresh(0.0, 0.95);
  std::size_t bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto dets = random_instance(rng, 12);
    const double t = thresh(rng);
    if (greedy_nms(dets, t) != subset_oracle(dets, t)) ++bad;
  }
  return {bad == 0, format("1000 instances of <= 12 boxes, %zu mismatches", bad)};
}

Outcome ap_matches_oracle() {
  std::mt19937_64 rng(2025);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const MatchResult m = random_match(rng);
    worst = std::max(worst, std::abs(average_precision(pr_curve(m, {})) - ap_oracle(m, 0.05)));
  }
  MatchResult none;
  none.num_eligible = 3;
  MatchResult perfect;
  perfect.num_eligible = 2;
  perfect.outcomes = {{0.9, MatchOutcome::TruePositive}, {0.3, MatchOutcome::TruePositive}};
  const double ap0 = average_precision(pr_curve(none, {})), ap1 = average_precision(pr_curve(perfect, {}));
  return {worst <= 1e-12 && ap0 == 0.0 && ap1 == 1.0,
          format("200 instances, max |AP - oracle| %.1e; no detections %.1f; perfect %.1f", worst, ap0, ap1)};
}

Outcome batch_norm_example() {
  BatchNormState st(1, 0.0);
  const Tensor y = batch_norm(Tensor({3, 1}, std::vector<double>{1, 2, 3}), st, Mode::Train);
  bool ok = std::abs(y[0] + 1.224744871391589) <= 1e-12 && std::abs(y[1]) <= 1e-12 &&
            std::abs(y[2] - 1.224744871391589) <= 1e-12;
  std::mt19937_64 rng(5);
  double worst_mean = 0, worst_var = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor x = random_tensor(rng, {17, 4}, 5.0);
    BatchNormState s(4, 0.0);
    const Tensor z = batch_norm(x, s, Mode::Train);
    for (std::size_t f = 0; f < 4; ++f) {
      double m = 0, v = 0;
      for (std::size_t n = 0; n < 17; ++n) m += z[n * 4 + f] / 17.0;
      for (std::size_t n = 0; n < 17; ++n) v += (z[n * 4 + f] - m) * (z[n * 4 + f] - m) / 17.0;
      worst_mean = std::max(worst_mean, std::abs(m));
      worst_var = std::max(worst_var, std::abs(v - 1.0));
    }
  }
  ok = ok && worst_mean <= 1e-9 && worst_var <= 1e-6;
  return {ok, format("{1,2,3} -> [%.6f, %.6f, %.6f]; random batches |mean| %.1e, |var-1| %.1e", y[0], y[1], y[2],
                     worst_mean, worst_var)};
}

Outcome shapes() {
  const Tensor out = conv2d(Tensor({32, 32, 3}, 1.0), Tensor({5, 5, 3, 4}, 0.1), nullptr, {1, 0});
  const Tensor pooled = max_pool2x2(Tensor({32, 32, 3}, 1.0));
  const double kept = double(pooled.size()) / (32.0 * 32.0 * 3.0);
  const std::size_t ko = AnchorSpec::original().shapes_per_location();
  const std::size_t ke = AnchorSpec::extended().shapes_per_location();
  const bool ok = out.dim(0) == 28 && out.dim(1) == 28 && kept == 0.25 && ko == 9 && ke == 15;
  return {ok, format("conv 32x32x3 * 5x5 -> %zux%zu; pool keeps %.2f; k = %zu / %zu", out.dim(0), out.dim(1), kept,
                     ko, ke)};
}

Outcome coverage() {
  std::vector<Box2D> gts;
  for (int dy = 0; dy < 16; ++dy)
    for (int dx = 0; dx < 16; ++dx) gts.push_back({96.0 + dx, 64.0 + dy, 128.0 + dx, 96.0 + dy});
  const double o = anchor_coverage_recall(AnchorSpec::original(16), 320, 240, gts, 0.3);
  const double e = anchor_coverage_recall(AnchorSpec::extended(16), 320, 240, gts, 0.3);
  return {o == 0.0 && e == 1.0, format("256 32x32 boxes at IoU 0.3: oRPN %.3f, eRPN %.3f", o, e)};
}

Outcome overfit() {
  const fs::path dir = scratch("overfit");
  RunConfig cfg;
  cfg.seed = 7;
  cfg.synth.seed = 3;
  cfg.model.dropout = 0.0;
  cfg.train.steps = 1500;
  cfg.train.momentum = 0.9;
  cfg.train.log_every = 0;
  write_synthetic_dataset(dir, cfg.synth, 2);
  const auto data = load_training_set(dir, cfg);
  const auto t0 = std::chrono::steady_clock::now();
  Detector m = make_detector(cfg);
  const auto h = train_detector(m, data, cfg);
  const double first = h.front().total, last = tail_mean(h, 20);
  const auto dets = detect_many(m, dataset_images(dir), cfg);
  EvalOptions opts;
  opts.iou_thresh["Car"] = 0.5;
  const auto report = evaluate_dataset(dets, load_dataset_labels(dir), {"Car"}, opts);
  const double secs = seconds_since(t0);
  double min_ap = 1.0;
  for (const auto& e : report.entries) min_ap = std::min(min_ap, e.ap);
  fs::remove_all(dir);
  return {last < 0.05 * first && min_ap == 1.0 && secs < 600.0,
          format("2 images, %zu steps: loss %.4f -> %.4f (%.1f%%), training AP@0.5 %.3f, %.0f s", h.size(), first,
                 last, 100.0 * last / first, min_ap, secs)};
}

Outcome directional() {
  const fs::path dir = scratch("directional");
  RunConfig base;
  base.seed = 7;
  base.train.steps = 3000;
  base.train.momentum = 0.9;
  base.train.log_every = 0;
  SceneSpec s = base.synth;
  s.seed = 1001;
  write_synthetic_dataset(dir / "train", s, 200);
  s.seed = 2002;
  write_synthetic_dataset(dir / "val", s, 50);
  const auto gts = load_dataset_labels(dir / "val");
  const auto images = dataset_images(dir / "val");

  struct Run {
    double ap = 0, final_loss = 0, secs = 0;
  };
  auto run = [&](AnchorVariant a, BlockVariant b) {
    RunConfig cfg = base;
    cfg.model.anchor_variant = a;
    cfg.model.extractor = b;
    const auto t0 = std::chrono::steady_clock::now();
    const auto data = load_training_set(dir / "train", cfg);
    Detector m = make_detector(cfg);
    const auto h = train_detector(m, data, cfg);
    Run r;
    r.final_loss = tail_mean(h, 200);
    EvalOptions opts;
    opts.levels = {Difficulty::Moderate};
    r.ap = evaluate_dataset(detect_many(m, images, cfg), gts, {"Car"}, opts).entries.at(0).ap;
    r.secs = seconds_since(t0);
    return r;
  };
  const Run ext = run(AnchorVariant::Extended, BlockVariant::IdentityMapping);
  const Run orig = run(AnchorVariant::Original, BlockVariant::IdentityMapping);
  const Run plain_res = run(AnchorVariant::Extended, BlockVariant::Original);
  fs::remove_all(dir);
  const bool ok = ext.ap > orig.ap && ext.final_loss <= plain_res.final_loss &&
                  std::max({ext.secs, orig.secs, plain_res.secs}) < 1800.0;
  return {ok, format("moderate AP@0.7 eRPN %.4f vs oRPN %.4f; final loss identity %.4f vs original %.4f; "
                     "runs %.0f/%.0f/%.0f s",
                     ext.ap, orig.ap, ext.final_loss, plain_res.final_loss, ext.secs, orig.secs, plain_res.secs)};
}

Outcome round_trips() {
  const fs::path dir = scratch("io");
  RunConfig cfg;
  cfg.seed = 9;
  cfg.model.depth = 1;
  cfg.train.steps = 5;
  cfg.train.log_every = 0;
  write_synthetic_dataset(dir, cfg.synth, 4);
  std::size_t bad = 0, checked = 0;
  for (const auto& stem : read_manifest(dir)) {
    const std::string label = read_file((dir / "labels" / (stem + ".txt")).string());
    const std::string ppm = read_file((dir / "images" / (stem + ".ppm")).string());
    bad += write_label_file(parse_label_file(label)) != label;
    bad += save_ppm(load_ppm(ppm)) != ppm;
    checked += 2;
  }
  // Detection files carry scores.
  std::mt19937_64 rng(1);
  std::vector<KittiLabel> dets;
  for (int i = 0; i < 50; ++i) dets.push_back(make_detection("Car", random_box(rng), double(rng() % 1000000) / 1e6));
  const std::string det_text = write_detections(dets);
  bad += write_detections(parse_label_file(det_text)) != det_text;
  ++checked;

  const auto data = load_training_set(dir, cfg);
  Detector m = make_detector(cfg);
  train_detector(m, data, cfg);
  const std::string ckpt = m.save_checkpoint();
  write_file_atomic((dir / "m.ckpt").string(), ckpt);
  Detector restored(cfg.model, 12345);
  restored.load_checkpoint(read_file((dir / "m.ckpt").string()));
  bad += restored.save_checkpoint() != ckpt;
  const auto images = dataset_images(dir);
  RunConfig loose = cfg;
  loose.score_thresh = 0.0;
  bad += detect_many(m, images, loose) != detect_many(restored, images, loose);
  checked += 2;

  const std::string conf = dump_config(cfg);
  RunConfig back;
  apply_config_text(back, conf, "dump");
  bad += dump_config(back) != conf;
  ++checked;
  fs::remove_all(dir);
  return {bad == 0, format("%zu round trips (labels, PPM, detections, checkpoint, restored inference, config), %zu "
                           "differ",
                           checked, bad)};
}

Outcome preprocessing() {
  Image img(1242, 375);
  std::mt19937_64 rng(3);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng());
  const Preprocessed p = preprocess_image(img);
  double worst = 0;
  const std::size_t n = p.tensor.dim(0) * p.tensor.dim(1);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0;
    for (std::size_t i = c; i < p.tensor.size(); i += 3) m += p.tensor[i];
    worst = std::max(worst, std::abs(m / double(n)));
  }
  return {p.sigma == 1.242 && worst <= 1e-9,
          format("1242x375 -> %zux%zu, sigma %.6g, max |channel mean| %.1e", p.tensor.dim(1), p.tensor.dim(0), p.sigma,
                 worst)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradients match finite differences", gradients},
      {"greedy NMS equals the subset oracle", nms_oracle},
      {"average precision equals the oracle", ap_matches_oracle},
      {"batch normalization", batch_norm_example},
      {"layer and anchor shapes", shapes},
      {"small-object anchor coverage", coverage},
      {"two-image overfit", overfit},
      {"anchor and block variants on held-out data", directional},
      {"file round trips", round_trips},
      {"KITTI-size preprocessing", preprocessing},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
