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
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>

#include "test_support.hpp"

using namespace rpnforge;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int status = -1;
  std::string output;
};

// Runs the CLI with stderr folded into stdout.
RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string("RPNFORGE_LOG=warn '") + RPNFORGE_CLI + "' " + args + " 2>&1";
  RunResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
  const int raw = pclose(p);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rpnforge_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  fs::path dir_;
};

const char* kSmallModel =
    "--set model.depth=1 --set model.fc_hidden=16 --set model.rpn_channels=8 --set model.roi_pool_h=2 "
    "--set model.roi_pool_w=2 --set synth.width=96 --set synth.height=64 --set synth.max_objects=2 "
    "--set synth.max_size=40";

}  // namespace

TEST_F(Cli, HelpListsEveryKey) {
  const auto r = run_cli("--help");
  EXPECT_EQ(r.status, 0);
  for (const auto& k : config_keys()) EXPECT_NE(r.output.find(k.name), std::string::npos) << k.name;
  EXPECT_NE(r.output.find("RPNFORGE_LOG"), std::string::npos);
  for (const char* sub : {"synth", "train", "detect", "eval", "anchors", "nms", "gradcheck"}) {
    EXPECT_NE(r.output.find(sub), std::string::npos) << sub;
  }
}

TEST_F(Cli, BadInvocationsFail) {
  EXPECT_NE(run_cli("").status, 0);
  EXPECT_NE(run_cli("frobnicate").status, 0);
  const auto r = run_cli("--set model.nope=1 synth --out " + path("d"));
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("model.nope"), std::string::npos);
  std::FILE* f = std::fopen(path("c.toml").c_str(), "w");
  std::fputs("[train]\nstepz = 3\n", f);
  std::fclose(f);
  EXPECT_NE(run_cli("--config " + path("c.toml") + " synth --out " + path("d")).status, 0);
}

TEST_F(Cli, SynthIsDeterministic) {
  ASSERT_EQ(run_cli("--seed 5 synth --count 3 --out " + path("a")).status, 0);
  ASSERT_EQ(run_cli("synth --count 3 --out " + path("b") + " --seed 5").status, 0);
  for (const std::string rel : {"dataset.txt", "images/000002.ppm", "labels/000000.txt"}) {
    EXPECT_EQ(read_file(path("a/" + rel)), read_file(path("b/" + rel))) << rel;
  }
  ASSERT_EQ(run_cli("--seed 6 synth --count 3 --out " + path("c")).status, 0);
  EXPECT_NE(read_file(path("a/images/000000.ppm")), read_file(path("c/images/000000.ppm")));

  ASSERT_EQ(run_cli("synth --count 0 --out " + path("empty")).status, 0);
  EXPECT_EQ(read_file(path("empty/dataset.txt")), "");
  EXPECT_FALSE(fs::exists(path("empty/images/000000.ppm")));
}

TEST_F(Cli, TrainDetectEvalFlow) {
  const std::string m = kSmallModel;
  ASSERT_EQ(run_cli(m + " --seed 3 synth --count 2 --out " + path("data")).status, 0);

  // Zero steps saves the initial weights, which match a second run.
  ASSERT_EQ(run_cli(m + " --seed 3 train --steps 0 --data " + path("data") + " --out " + path("init.ckpt")).status, 0);
  Detector fresh = [&] {
    RunConfig cfg;
    apply_config_text(cfg, read_file(path("init.ckpt.toml")), "sidecar");
    return make_detector(cfg);
  }();
  EXPECT_EQ(fresh.save_checkpoint(), read_file(path("init.ckpt")));

  for (const char* name : {"a", "b"}) {
    const auto r = run_cli(m + " --seed 3 train --steps 3 --data " + path("data") + " --out " + path(std::string(name) + ".ckpt"));
    ASSERT_EQ(r.status, 0) << r.output;
  }
  EXPECT_EQ(read_file(path("a.ckpt")), read_file(path("b.ckpt")));
  const std::string log = read_file(path("a.ckpt.loss.csv"));
  EXPECT_EQ(log, read_file(path("b.ckpt.loss.csv")));
  EXPECT_EQ(log.substr(0, log.find('\n') + 1), "step,total,rpn_cls,rpn_reg,det_cls,det_reg\n");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);

  auto r = run_cli("detect --model " + path("a.ckpt") + " --data " + path("data") + " --out " + path("dets") +
                   " --score-thresh 0.99");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_TRUE(fs::exists(path("dets/000000.txt")));

  // Ground truth scored as detections is perfect; a missing file counts as no detections.
  fs::create_directories(path("perfect"));
  for (const std::string stem : {"000000", "000001"}) {
    auto labels = parse_label_file(read_file(path("data/labels/" + stem + ".txt")));
    for (auto& l : labels) l.score = 0.9;
    std::FILE* f = std::fopen(path("perfect/" + stem + ".txt").c_str(), "w");
    const std::string text = write_detections(labels);
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
  }
  r = run_cli("eval --gt " + path("data") + " --det " + path("perfect") + " --out " + path("rep"));
  ASSERT_EQ(r.status, 0) << r.output;
  const std::string csv = read_file(path("rep/report.csv"));
  EXPECT_NE(csv.find("Car,Moderate,0.70,1.000000"), std::string::npos) << csv;
  EXPECT_TRUE(fs::exists(path("rep/report.json")));
  EXPECT_TRUE(fs::exists(path("rep/pr_Car_Hard.csv")));

  fs::remove(path("perfect/000001.txt"));
  ASSERT_EQ(run_cli("eval --gt " + path("data") + " --det " + path("perfect") + " --out " + path("rep2")).status, 0);
  EXPECT_EQ(read_file(path("rep2/report.csv")).find("Car,Moderate,0.70,1.000000"), std::string::npos);
}

TEST_F(Cli, NmsAndAnchors) {
  std::FILE* f = std::fopen(path("empty.txt").c_str(), "w");
  std::fclose(f);
  ASSERT_EQ(run_cli("nms --in " + path("empty.txt") + " --out " + path("kept.txt")).status, 0);
  EXPECT_EQ(read_file(path("kept.txt")), "");

  const std::string dets = write_detections({make_detection("Car", {0, 0, 10, 10}, 0.9),
                                             make_detection("Car", {1, 1, 11, 11}, 0.8),
                                             make_detection("Van", {1, 1, 11, 11}, 0.7)});
  f = std::fopen(path("dets.txt").c_str(), "w");
  std::fwrite(dets.data(), 1, dets.size(), f);
  std::fclose(f);
  const auto r = run_cli("nms --in " + path("dets.txt") + " --thresh 0.5");
  ASSERT_EQ(r.status, 0);
  const auto kept = parse_label_file(r.output);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].category, "Car");
  EXPECT_EQ(kept[1].category, "Van");

  const auto a = run_cli("--set anchors.variant=oRPN anchors --width 160 --height 96");
  ASSERT_EQ(a.status, 0);
  EXPECT_EQ(std::count(a.output.begin(), a.output.end(), '\n'), 6 * 10 * 9);
  const auto e = run_cli("anchors --width 160 --height 96");
  EXPECT_EQ(std::count(e.output.begin(), e.output.end(), '\n'), 6 * 10 * 15);
}

TEST_F(Cli, GradcheckExitCode) {
  const auto ok = run_cli("gradcheck --seeds 1 --only conv2d");
  EXPECT_EQ(ok.status, 0) << ok.output;
  const auto bad = run_cli("gradcheck --seeds 1 --only conv2d --corrupt 0.1");
  EXPECT_EQ(bad.status, 1) << bad.output;
}
