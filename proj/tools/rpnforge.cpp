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

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rpnforge.hpp"

namespace fs = std::filesystem;
using namespace rpnforge;

namespace {

struct GlobalFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
};

// defaults < --config file < --set < --seed/--jobs < subcommand flags
RunConfig resolve_config(const GlobalFlags& g) {
  RunConfig cfg;
  if (!g.config_path.empty()) apply_config_text(cfg, read_file(g.config_path), g.config_path);
  for (const auto& kv : g.overrides) apply_override(cfg, kv);
  if (g.seed) cfg.seed = *g.seed;
  if (g.jobs) cfg.jobs = *g.jobs;
  return cfg;
}

std::string keys_footer() {
  std::ostringstream os;
  os << "Configuration keys (TOML file via --config, or --set key=value; defaults shown):\n";
  const RunConfig defaults;
  for (const auto& k : config_keys()) {
    os << "  " << k.name << " = " << k.get(defaults) << "\n      " << k.help << "\n";
  }
  os << "\nEnvironment: RPNFORGE_LOG=error|warn|info|debug (default info)\n";
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
  } else {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file_atomic(path, text);
  }
}

int cmd_synth(RunConfig cfg, const std::string& out, std::optional<std::size_t> count) {
  if (count) cfg.synth_count = *count;
  validate_run_config(cfg);
  SceneSpec spec = cfg.synth;
  spec.seed = cfg.seed;
  const auto stems = write_synthetic_dataset(out, spec, cfg.synth_count);
  log(LogLevel::Info, "wrote ", stems.size(), " images to ", out);
  return 0;
}

int cmd_train(RunConfig cfg, const std::string& data, const std::string& out, std::string loss_log,
              std::optional<std::size_t> steps) {
  if (steps) cfg.train.steps = *steps;
  validate_run_config(cfg);
  if (loss_log.empty()) loss_log = out + ".loss.csv";
  const auto samples = load_training_set(data, cfg);
  log(LogLevel::Info, "training on ", samples.size(), " images, ", cfg.train.steps, " steps, ",
      to_string(cfg.model.anchor_variant), ", ", to_string(cfg.model.extractor));

  Detector model = make_detector(cfg);
  std::ofstream lf(loss_log, std::ios::binary | std::ios::trunc);
  if (!lf) fail(loss_log, ": cannot open for writing");
  lf << loss_log_header();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    train_detector(model, samples, cfg, [&](std::size_t step, const LossBreakdown& lb) {
      lf << loss_log_row(step, lb);
      if (!lf) fail(loss_log, ": write failed");
    });
  } catch (const Error& e) {
    // A failing step throws before any parameter changes.
    write_file_atomic(out, model.save_checkpoint());
    write_file_atomic(out + ".toml", dump_config(cfg));
    fail(e.what(), "; last good checkpoint saved to ", out);
  }
  lf.close();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  write_file_atomic(out, model.save_checkpoint());
  write_file_atomic(out + ".toml", dump_config(cfg));
  log(LogLevel::Info, "saved ", out, " after ", secs, " s");
  return 0;
}

// Model settings come from the checkpoint's sidecar, if present, so detect
// runs with the architecture that was trained.
Detector load_model(RunConfig& cfg, const std::string& path, const GlobalFlags& g) {
  const std::string sidecar = path + ".toml";
  if (fs::exists(sidecar)) {
    RunConfig trained;
    apply_config_text(trained, read_file(sidecar), sidecar);
    cfg.model = trained.model;
    for (const auto& kv : g.overrides) {
      if (kv.rfind("model.", 0) == 0 || kv.rfind("anchors.", 0) == 0 || kv.rfind("proposals.", 0) == 0) {
        apply_override(cfg, kv);
      }
    }
  }
  validate_run_config(cfg);
  Detector model = make_detector(cfg);
  try {
    model.load_checkpoint(read_file(path));
  } catch (const Error& e) {
    fail(path, ": ", e.what());
  }
  return model;
}

int cmd_detect(RunConfig cfg, const GlobalFlags& g, const std::string& model_path, const std::string& data,
               const std::string& image, const std::string& out, std::optional<double> thresh) {
  if (thresh) cfg.score_thresh = *thresh;
  Detector model = load_model(cfg, model_path, g);
  if (!image.empty()) {
    const auto dets = detect_image(model, load_ppm(read_file(image)), cfg);
    write_text(out, write_detections(dets));
    return 0;
  }
  std::vector<std::pair<std::string, Image>> images;
  for (const auto& stem : read_manifest(data)) {
    const auto path = (fs::path(data) / "images" / (stem + ".ppm")).string();
    try {
      images.emplace_back(stem, load_ppm(read_file(path)));
    } catch (const Error& e) {
      fail(path, ": ", e.what());
    }
  }
  const auto results = detect_many(model, images, cfg);
  fs::create_directories(out);
  std::size_t total = 0;
  for (const auto& [stem, dets] : results) {
    write_file_atomic((fs::path(out) / (stem + ".txt")).string(), write_detections(dets));
    total += dets.size();
  }
  log(LogLevel::Info, "wrote ", total, " detections for ", results.size(), " images to ", out);
  return 0;
}

int cmd_eval(RunConfig cfg, const std::string& gt, const std::string& det, const std::string& out) {
  validate_run_config(cfg);
  const auto gts = load_dataset_labels(gt);
  const auto dets = load_detection_dir(det);
  EvalOptions opts = eval_options(cfg);
  opts.provenance["ground_truth"] = gt;
  opts.provenance["detections"] = det;
  const auto report = emit_report(evaluate_dataset(dets, gts, cfg.object_classes(), opts));
  write_report(out, report);
  std::cout << report.csv;
  return 0;
}

int cmd_anchors(RunConfig cfg, std::optional<std::size_t> width, std::optional<std::size_t> height,
                const std::string& out) {
  validate_run_config(cfg);
  const Image img(width.value_or(cfg.synth.width), height.value_or(cfg.synth.height));
  const PreparedImage p = prepare_image(img, cfg.model.stride, cfg.long_max, cfg.short_max);
  const auto grid = anchor_grid_for(cfg.model, p.tensor.dim(0) / cfg.model.stride, p.tensor.dim(1) / cfg.model.stride);
  std::ostringstream os;
  write_anchor_dump(os, grid);
  write_text(out, os.str());
  log(LogLevel::Info, to_string(cfg.model.anchor_variant), ": ", grid.feat_h, "x", grid.feat_w, " locations, k=",
      grid.k(), ", ", grid.size(), " anchors");
  return 0;
}

int cmd_nms(RunConfig cfg, const std::string& in, const std::string& out, std::optional<double> thresh) {
  if (thresh) cfg.model.det_nms_thresh = *thresh;
  validate_run_config(cfg);
  const auto labels = parse_label_file(read_file(in));
  std::vector<std::string> names;
  std::vector<ScoredBox> boxes;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& l = labels[i];
    if (!l.score) fail(in, ": line ", i + 1, " has no score");
    const auto it = std::find(names.begin(), names.end(), l.category);
    const auto cls = static_cast<std::size_t>(it - names.begin());
    if (it == names.end()) names.push_back(l.category);
    boxes.push_back({l.bbox, *l.score, static_cast<int>(cls), i});
  }
  std::vector<KittiLabel> kept;
  for (const auto& b : per_class_nms(boxes, cfg.model.det_nms_thresh)) kept.push_back(labels[b.source_index]);
  write_text(out, write_detections(kept));
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, std::size_t seeds, const std::vector<std::string>& only, double corrupt) {
  GradCheckOptions opts;
  opts.seeds = seeds;
  opts.base_seed = cfg.seed;
  opts.corrupt = corrupt;
  opts.only = only;
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::printf("%-30s %-11s %-9s %s\n", "case", "max_rel_err", "tolerance", "status");
  for (const auto& r : run_gradcheck_suite(opts)) {
    std::printf("%-30s %-11.3e %-9.0e %s (seeds=%zu, redraws=%zu)\n", r.name.c_str(), r.max_error, r.tolerance,
                r.passed() ? "PASS" : "FAIL", r.seeds, r.redraws);
    ok = ok && r.passed();
  }
  std::printf("%.1f s\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rpnforge: two-stage region-proposal object detector"};
  app.footer(keys_footer());
  app.require_subcommand(1);
  app.fallthrough();
  app.get_formatter()->column_width(34);

  GlobalFlags g;
  std::uint64_t seed = 0;
  std::size_t jobs = 0;
  app.add_option("--config", g.config_path, "TOML configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "override a configuration key (key=value, repeatable)")
      ->allow_extra_args(false);
  auto* seed_opt = app.add_option("--seed", seed, "master seed (same as --set seed=N)");
  auto* jobs_opt = app.add_option("--jobs", jobs, "worker threads (same as --set jobs=N)");

  std::string out, data, model_path, image, loss_log, in, gt, det;
  std::optional<std::size_t> count, steps, width, height;
  std::optional<double> thresh;
  std::size_t seeds = 10;
  std::vector<std::string> only;
  double corrupt = 0.0;

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset (images/, labels/, dataset.txt)");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--count", count, "number of images (synth.count)");

  auto* train = app.add_subcommand("train", "train a detector and save a checkpoint");
  train->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "checkpoint path; the resolved config goes to <out>.toml")->required();
  train->add_option("--log", loss_log, "per-step loss CSV (default <out>.loss.csv)");
  train->add_option("--steps", steps, "training steps (train.steps)");

  auto* detect_cmd = app.add_subcommand("detect", "run a trained detector");
  detect_cmd->add_option("--model", model_path, "checkpoint path")->required()->check(CLI::ExistingFile);
  auto* data_opt = detect_cmd->add_option("--data", data, "dataset directory")->check(CLI::ExistingDirectory);
  auto* image_opt = detect_cmd->add_option("--image", image, "single PPM image")->check(CLI::ExistingFile);
  data_opt->excludes(image_opt);
  detect_cmd->add_option("--out", out, "output directory (with --data) or file (with --image, default stdout)");
  detect_cmd->add_option("--score-thresh", thresh, "minimum score (detect.score_thresh)");

  auto* eval = app.add_subcommand("eval", "score detections against ground truth");
  eval->add_option("--gt", gt, "ground-truth dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--det", det, "directory of <stem>.txt detection files")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", out, "report directory")->required();

  auto* anchors = app.add_subcommand("anchors", "dump the anchor grid for an image size");
  anchors->add_option("--width", width, "image width in pixels (default synth.width)");
  anchors->add_option("--height", height, "image height in pixels (default synth.height)");
  anchors->add_option("--out", out, "output file (default stdout)");

  auto* nms = app.add_subcommand("nms", "per-class greedy NMS over a KITTI detection file");
  nms->add_option("--in", in, "input detection file")->required()->check(CLI::ExistingFile);
  nms->add_option("--out", out, "output file (default stdout)");
  nms->add_option("--thresh", thresh, "IoU threshold (detect.nms_thresh)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
  gradcheck->add_option("--seeds", seeds, "random instances per case")->check(CLI::PositiveNumber);
  gradcheck->add_option("--only", only, "restrict to these cases");
  gradcheck->add_option("--corrupt", corrupt, "perturb one analytic gradient by this fraction (self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    log_threshold();
    if (seed_opt->count()) g.seed = seed;
    if (jobs_opt->count()) g.jobs = jobs;
    RunConfig cfg = resolve_config(g);
    if (*synth) return cmd_synth(cfg, out, count);
    if (*train) return cmd_train(cfg, data, out, loss_log, steps);
    if (*detect_cmd) {
      if (data.empty() == image.empty()) fail("detect: give exactly one of --data or --image");
      if (!data.empty() && out.empty()) fail("detect: --data needs --out");
      return cmd_detect(cfg, g, model_path, data, image, out, thresh);
    }
    if (*eval) return cmd_eval(cfg, gt, det, out);
    if (*anchors) return cmd_anchors(cfg, width, height, out);
    if (*nms) return cmd_nms(cfg, in, out, thresh);
    if (*gradcheck) return cmd_gradcheck(cfg, seeds, only, corrupt);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "rpnforge: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
