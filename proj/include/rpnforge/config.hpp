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
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "rpnforge/detector.hpp"
#include "rpnforge/error.hpp"
#include "rpnforge/kitti.hpp"
#include "rpnforge/residual.hpp"
#include "rpnforge/synthetic.hpp"

namespace rpnforge {

struct TrainOptions {
  std::size_t steps = 2000;
  double lr = 1e-3;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::size_t lr_step = 0;  // multiply lr by lr_gamma every lr_step steps; 0 = constant
  double lr_gamma = 0.1;
  std::size_t log_every = 100;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  DetectorConfig model;
  SceneSpec synth;
  std::size_t synth_count = 20;
  TrainOptions train;
  double score_thresh = 0.05;
  double long_max = 1000.0;
  double short_max = 600.0;
  double eval_threshold_step = 0.05;
  double eval_iou = 0.0;  // 0 = per-class defaults (Car 0.7, others 0.5)
  std::vector<Difficulty> eval_levels{Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard};

  double lr_at(std::size_t step) const {
    if (train.lr_step == 0) return train.lr;
    double lr = train.lr;
    for (std::size_t s = train.lr_step; s <= step; s += train.lr_step) lr *= train.lr_gamma;
    return lr;
  }

  std::vector<std::string> object_classes() const {
    return std::vector<std::string>(model.classes.begin() + 1, model.classes.end());
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t end = s.find(',', pos);
    if (end == std::string_view::npos) end = s.size();
    std::string item = trim(s.substr(pos, end - pos));
    if (!item.empty()) out.push_back(std::move(item));
    pos = end + 1;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& i : items) out += (out.empty() ? "" : ",") + i;
  return out;
}

inline double to_double(const std::string& v) {
  double out = 0.0;
  const char* first = v.data();
  if (!v.empty() && v[0] == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) fail("expected a number, got '", v, "'");
  return out;
}

inline std::uint64_t to_uint(const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    fail("expected a non-negative integer, got '", v, "'");
  }
  return out;
}

inline std::string fmt(double v) {
  // Shortest text that parses back to the same double.
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<double> to_doubles(const std::string& v) {
  std::vector<double> out;
  for (const auto& s : split_list(v)) out.push_back(to_double(s));
  return out;
}

inline std::string fmt_doubles(const std::vector<double>& v) {
  std::vector<std::string> s;
  for (double d : v) s.push_back(fmt(d));
  return join(s);
}

inline BlockVariant to_block(const std::string& v) {
  for (auto b : {BlockVariant::Plain, BlockVariant::Original, BlockVariant::IdentityMapping}) {
    if (v == to_string(b)) return b;
  }
  fail("expected plain, residual_original or residual_identity, got '", v, "'");
}

inline AnchorVariant to_anchor_variant(const std::string& v) {
  std::string l(v);
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "orpn" || l == "original") return AnchorVariant::Original;
  if (l == "erpn" || l == "extended") return AnchorVariant::Extended;
  fail("expected oRPN or eRPN, got '", v, "'");
}

}  // namespace config_detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using namespace config_detail;
  // Shorthands for the common field types.
  auto u = [](std::string name, std::string help, auto member) {
    return ConfigKey{std::move(name), std::move(help),
                     [member](RunConfig& c, const std::string& v) {
                       member(c) = static_cast<std::remove_cvref_t<decltype(member(c))>>(to_uint(v));
                     },
                     [member](const RunConfig& c) { return std::to_string(member(c)); }};
  };
  auto d = [](std::string name, std::string help, auto member) {
    return ConfigKey{std::move(name), std::move(help),
                     [member](RunConfig& c, const std::string& v) { member(c) = to_double(v); },
                     [member](const RunConfig& c) { return fmt(member(c)); }};
  };
  static const std::vector<ConfigKey> keys = [&] {
    std::vector<ConfigKey> k;
    k.push_back(u("seed", "master seed for data synthesis, init and sampling", [](auto& c) -> auto& { return c.seed; }));
    k.push_back(u("jobs", "worker threads for detect", [](auto& c) -> auto& { return c.jobs; }));

    k.push_back({"model.extractor", "plain | residual_original | residual_identity",
                 [](RunConfig& c, const std::string& v) { c.model.extractor = to_block(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.extractor)); }});
    k.push_back(u("model.depth", "blocks after the stem", [](auto& c) -> auto& { return c.model.depth; }));
    k.push_back(u("model.stem_width", "channels of the first stem stage (doubling per stage)", [](auto& c) -> auto& { return c.model.stem_width; }));
    k.push_back(u("model.channels", "channel cap and block width", [](auto& c) -> auto& { return c.model.channels; }));
    k.push_back(u("model.stride", "feature stride in px, a power of two", [](auto& c) -> auto& { return c.model.stride; }));
    k.push_back(u("model.rpn_channels", "width of the RPN 3x3 conv", [](auto& c) -> auto& { return c.model.rpn_channels; }));
    k.push_back(u("model.roi_pool_h", "RoI pool output rows", [](auto& c) -> auto& { return c.model.roi_pool_h; }));
    k.push_back(u("model.roi_pool_w", "RoI pool output columns", [](auto& c) -> auto& { return c.model.roi_pool_w; }));
    k.push_back(u("model.fc_hidden", "width of the two head FC layers", [](auto& c) -> auto& { return c.model.fc_hidden; }));
    k.push_back(d("model.dropout", "dropout probability in the head", [](auto& c) -> auto& { return c.model.dropout; }));
    k.push_back(d("model.head_init_std", "init std of the output layers", [](auto& c) -> auto& { return c.model.head_init_std; }));
    k.push_back({"model.classes", "object classes, comma separated (background is implicit)",
                 [](RunConfig& c, const std::string& v) {
                   auto list = split_list(v);
                   if (list.empty()) fail("need at least one class");
                   list.insert(list.begin(), "__background__");
                   c.model.classes = std::move(list);
                 },
                 [](const RunConfig& c) { return join(c.object_classes()); }});
    k.push_back({"model.frozen", "parameter-name prefixes to freeze, comma separated",
                 [](RunConfig& c, const std::string& v) { c.model.frozen = split_list(v); },
                 [](const RunConfig& c) { return join(c.model.frozen); }});

    k.push_back({"anchors.variant", "oRPN (128,256,512) | eRPN (32,64,128,256,512)",
                 [](RunConfig& c, const std::string& v) { c.model.anchor_variant = to_anchor_variant(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.anchor_variant)); }});
    k.push_back({"anchors.ratios", "height:width ratios, comma separated",
                 [](RunConfig& c, const std::string& v) { c.model.anchor_ratios = to_doubles(v); },
                 [](const RunConfig& c) { return fmt_doubles(c.model.anchor_ratios); }});
    k.push_back(d("anchors.pos_iou", "IoU above which an anchor is positive", [](auto& c) -> auto& { return c.model.rpn_pos_iou; }));
    k.push_back(d("anchors.neg_iou", "IoU below which an anchor is negative", [](auto& c) -> auto& { return c.model.rpn_neg_iou; }));
    k.push_back(u("anchors.batch", "anchors sampled per image", [](auto& c) -> auto& { return c.model.rpn_batch; }));

    k.push_back(u("proposals.pre_nms_top_n", "proposals kept before NMS", [](auto& c) -> auto& { return c.model.pre_nms_top_n; }));
    k.push_back(u("proposals.post_nms_top_n_train", "proposals kept after NMS in training", [](auto& c) -> auto& { return c.model.post_nms_top_n_train; }));
    k.push_back(u("proposals.post_nms_top_n_test", "proposals kept after NMS at inference", [](auto& c) -> auto& { return c.model.post_nms_top_n_test; }));
    k.push_back(d("proposals.nms_thresh", "proposal NMS IoU threshold", [](auto& c) -> auto& { return c.model.rpn_nms_thresh; }));

    k.push_back(u("roi.per_image", "RoIs sampled per image", [](auto& c) -> auto& { return c.model.rois_per_image; }));
    k.push_back(d("roi.fg_fraction", "foreground share of sampled RoIs", [](auto& c) -> auto& { return c.model.fg_fraction; }));
    k.push_back(d("roi.fg_iou", "IoU at which a RoI is foreground", [](auto& c) -> auto& { return c.model.fg_iou; }));

    k.push_back(d("loss.rpn_lambda", "RPN regression weight", [](auto& c) -> auto& { return c.model.rpn_lambda; }));
    k.push_back(d("loss.det_lambda", "detection regression weight", [](auto& c) -> auto& { return c.model.det_lambda; }));

    k.push_back(u("train.steps", "SGD steps (one image each)", [](auto& c) -> auto& { return c.train.steps; }));
    k.push_back(d("train.lr", "learning rate", [](auto& c) -> auto& { return c.train.lr; }));
    k.push_back(d("train.momentum", "SGD momentum", [](auto& c) -> auto& { return c.train.momentum; }));
    k.push_back(d("train.weight_decay", "L2 weight decay", [](auto& c) -> auto& { return c.train.weight_decay; }));
    k.push_back(u("train.lr_step", "steps between lr decays (0 = none)", [](auto& c) -> auto& { return c.train.lr_step; }));
    k.push_back(d("train.lr_gamma", "lr decay factor", [](auto& c) -> auto& { return c.train.lr_gamma; }));
    k.push_back(u("train.log_every", "progress message period in steps", [](auto& c) -> auto& { return c.train.log_every; }));

    k.push_back(u("synth.count", "images to generate", [](auto& c) -> auto& { return c.synth_count; }));
    k.push_back(u("synth.width", "image width", [](auto& c) -> auto& { return c.synth.width; }));
    k.push_back(u("synth.height", "image height", [](auto& c) -> auto& { return c.synth.height; }));
    k.push_back(u("synth.min_objects", "objects per image, lower bound", [](auto& c) -> auto& { return c.synth.min_objects; }));
    k.push_back(u("synth.max_objects", "objects per image, upper bound", [](auto& c) -> auto& { return c.synth.max_objects; }));
    k.push_back(u("synth.min_size", "object side, lower bound (px)", [](auto& c) -> auto& { return c.synth.min_size; }));
    k.push_back(u("synth.max_size", "object side, upper bound (px)", [](auto& c) -> auto& { return c.synth.max_size; }));
    k.push_back(d("synth.noise", "background noise amplitude", [](auto& c) -> auto& { return c.synth.noise; }));

    k.push_back(d("detect.score_thresh", "minimum class probability to report", [](auto& c) -> auto& { return c.score_thresh; }));
    k.push_back(d("detect.nms_thresh", "per-class NMS IoU threshold", [](auto& c) -> auto& { return c.model.det_nms_thresh; }));
    k.push_back(d("detect.long_max", "preprocessing cap on the long side", [](auto& c) -> auto& { return c.long_max; }));
    k.push_back(d("detect.short_max", "preprocessing cap on the short side", [](auto& c) -> auto& { return c.short_max; }));

    k.push_back(d("eval.threshold_step", "score threshold sweep step", [](auto& c) -> auto& { return c.eval_threshold_step; }));
    k.push_back(d("eval.iou", "match IoU for every class (0 = Car 0.7, others 0.5)", [](auto& c) -> auto& { return c.eval_iou; }));
    k.push_back({"eval.levels", "difficulty levels, comma separated",
                 [](RunConfig& c, const std::string& v) {
                   c.eval_levels.clear();
                   for (const auto& s : split_list(v)) c.eval_levels.push_back(parse_difficulty(s));
                   if (c.eval_levels.empty()) fail("need at least one level");
                 },
                 [](const RunConfig& c) {
                   std::vector<std::string> s;
                   for (auto l : c.eval_levels) {
                     std::string n = to_string(l);
                     std::transform(n.begin(), n.end(), n.begin(), [](unsigned char ch) { return std::tolower(ch); });
                     s.push_back(n);
                   }
                   return join(s);
                 }});
    return k;
  }();
  return keys;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = config_keys();
  const auto it = std::find_if(keys.begin(), keys.end(), [&](const ConfigKey& k) { return k.name == key; });
  if (it == keys.end()) fail("unknown config key '", key, "' (see --help for the full list)");
  try {
    it->set(cfg, value);
  } catch (const Error& e) {
    fail("config key '", key, "': ", e.what());
  }
}

// `key=value` as given to --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) fail("override '", assignment, "' is not of the form key=value");
  set_config_value(cfg, config_detail::trim(assignment.substr(0, eq)), config_detail::trim(assignment.substr(eq + 1)));
}

// A TOML subset: `[section]` headers, `key = value` lines, `#` comments,
// values that are bare scalars, "quoted strings" or flat [arrays]. Array
// items are joined with commas.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text,
                                                                          const std::string& origin) {
  using config_detail::trim;
  std::vector<std::pair<std::string, std::string>> out;
  std::string section;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    auto where = [&] { return origin + ":" + std::to_string(line_no) + ": "; };

    bool in_quotes = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') in_quotes = !in_quotes;
      if (line[i] == '#' && !in_quotes) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(where(), "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) fail(where(), "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(where(), "expected key = value");
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) fail(where(), "missing key");
    auto unquote = [&](std::string v) {
      v = trim(v);
      if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
      if (!v.empty() && v.front() == '"') fail(where(), "unterminated string");
      return v;
    };
    if (!value.empty() && value.front() == '[') {
      if (value.back() != ']') fail(where(), "unterminated array");
      std::vector<std::string> items;
      for (const auto& item : config_detail::split_list(std::string_view(value).substr(1, value.size() - 2))) {
        items.push_back(unquote(item));
      }
      value = config_detail::join(items);
    } else {
      value = unquote(value);
    }
    out.emplace_back(section.empty() ? key : section + "." + key, value);
  }
  return out;
}

inline void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& origin) {
  for (const auto& [key, value] : parse_config_text(text, origin)) {
    try {
      set_config_value(cfg, key, value);
    } catch (const Error& e) {
      fail(origin, ": ", e.what());
    }
  }
}

// Every key with its current value, in the file format above.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& k : config_keys()) {
    const auto dot = k.name.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.name.substr(0, dot);
    const std::string key = dot == std::string::npos ? k.name : k.name.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    std::string v = k.get(cfg);
    const bool bare = !v.empty() && v.find_first_not_of("0123456789.-+eE") == std::string::npos;
    out += key + " = " + (bare ? v : "\"" + v + "\"") + "\n";
  }
  return out;
}

inline void validate_run_config(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.synth.validate();
  if (cfg.jobs == 0) fail("jobs must be >= 1");
  if (!(cfg.train.lr >= 0.0)) fail("train.lr must be non-negative");
  if (!(cfg.train.momentum >= 0.0 && cfg.train.momentum < 1.0)) fail("train.momentum must be in [0,1)");
  if (!(cfg.score_thresh >= 0.0 && cfg.score_thresh <= 1.0)) fail("detect.score_thresh must be in [0,1]");
  if (!(cfg.model.det_nms_thresh >= 0.0 && cfg.model.det_nms_thresh < 1.0)) fail("detect.nms_thresh must be in [0,1)");
  if (!(cfg.eval_iou >= 0.0 && cfg.eval_iou <= 1.0)) fail("eval.iou must be in [0,1]");
}

}  // namespace rpnforge
