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
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rpnforge/anchors.hpp"
#include "rpnforge/batch_norm.hpp"
#include "rpnforge/detector.hpp"
#include "rpnforge/error.hpp"
#include "rpnforge/gradcheck.hpp"
#include "rpnforge/layers.hpp"
#include "rpnforge/losses.hpp"
#include "rpnforge/residual.hpp"
#include "rpnforge/synthetic.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

// Raised when a probe's stencil straddles a point where the function is not
// differentiable (relu at 0, a max-pool tie). The instance is then redrawn.
struct NonDifferentiableProbe : Error {
  using Error::Error;
};

// Shared state for one check run: randomness, probe selection, and an
// optional deliberate corruption of the analytic gradient (largest-magnitude
// element scaled by 1 + corrupt) used to prove the harness can fail.
//
// Each probe combines central differences at steps h and h/2 (Richardson
// extrapolation, cancelling the h^2 term). When a probe misses, the spread
// between the raw and one-sided estimates separates a wrong gradient (they
// agree with each other, not with the analytic value) from a straddled kink.
class GradProbe {
 public:
  GradProbe(std::uint64_t seed, double tolerance, double eps = 1e-5, double corrupt = 0.0,
            std::size_t max_probes = 0)
      : rng_(seed), tol_(tolerance), eps_(eps), corrupt_(corrupt), max_probes_(max_probes) {}

  Rng& rng() { return rng_; }

  Tensor random(Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> d(0.0, scale);
    for (auto& v : t.values()) v = d(rng_);
    return t;
  }

  // Scalar loss.
  void check(const std::function<double()>& loss, std::span<double> values, Tensor analytic) {
    static const Tensor unit({1}, {1.0});
    run([&] { return Tensor({1}, {loss()}); }, unit, values, std::move(analytic));
  }

  // Tensor-valued op reduced by the projection r. Outputs are differenced
  // before projecting, which keeps unaffected outputs from adding roundoff.
  void check_map(const std::function<Tensor()>& op, const Tensor& r, std::span<double> values, Tensor analytic) {
    run(op, r, values, std::move(analytic));
  }

  void check_params(const std::function<double()>& loss, const std::vector<NamedParam>& params) {
    for (const auto& np : params) check(loss, np.param->value.values(), np.param->grad);
  }
  void check_params_map(const std::function<Tensor()>& op, const Tensor& r, const std::vector<NamedParam>& params) {
    for (const auto& np : params) check_map(op, r, np.param->value.values(), np.param->grad);
  }

  double worst() const { return worst_; }

 private:
  void run(const std::function<Tensor()>& op, const Tensor& r, std::span<double> values, Tensor analytic) {
    if (values.size() != analytic.size()) fail("gradcheck: value/gradient size mismatch");
    if (values.empty()) return;
    std::size_t top = 0;
    for (std::size_t i = 1; i < analytic.size(); ++i) {
      if (std::abs(analytic[i]) > std::abs(analytic[top])) top = i;
    }
    if (corrupt_ != 0.0) analytic[top] *= 1.0 + corrupt_;
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_probes_ > 0 && values.size() > max_probes_) {
      std::shuffle(idx.begin(), idx.end(), rng_);
      idx.resize(max_probes_);
      if (std::find(idx.begin(), idx.end(), top) == idx.end()) idx.push_back(top);
    }
    auto proj = [&r](const Tensor& hi, const Tensor& lo) {
      hi.require_same_shape(r, "gradcheck projection");
      double acc = 0.0;
      for (std::size_t k = 0; k < r.size(); ++k) acc += r[k] * (hi[k] - lo[k]);
      return acc;
    };
    const double h = eps_;
    for (std::size_t i : idx) {
      const double saved = values[i];
      auto at = [&](double delta) {
        values[i] = saved + delta;
        Tensor y = op();
        values[i] = saved;
        return y;
      };
      const Tensor m2 = at(-h), m1 = at(-h / 2), y0 = at(0.0), p1 = at(h / 2), p2 = at(h);
      const double d1 = proj(p2, m2) / (2.0 * h);
      const double d2 = proj(p1, m1) / h;
      const double n = (4.0 * d2 - d1) / 3.0;
      const double a = analytic[i];
      double err = relative_error(a, n);
      if (std::isnan(err)) err = std::numeric_limits<double>::infinity();
      if (err >= tol_) {
        // On a smooth function these spreads are O(h) or smaller.
        const double spread = std::max({std::abs(d1 - d2), std::abs(proj(p2, y0) - proj(y0, m2)) / h,
                                        std::abs(proj(p1, y0) - proj(y0, m1)) / (h / 2)});
        if (spread > std::abs(n - a)) {
          throw NonDifferentiableProbe("gradcheck: stencil straddles a non-differentiable point");
        }
      }
      worst_ = std::max(worst_, err);
    }
  }

  Rng rng_;
  double tol_;
  double eps_;
  double corrupt_;
  std::size_t max_probes_;
  double worst_ = 0.0;
};

namespace gradcheck_detail {

// Redraws values that sit within `gap` of a kink so the central difference
// never straddles it.
inline void avoid(Tensor& t, double kink, double gap) {
  for (auto& v : t.values()) {
    if (std::abs(v - kink) < gap) v = kink + (v < kink ? -gap : gap) * 4.0;
  }
}

inline void zero_grads(const std::vector<NamedParam>& ps) {
  for (const auto& p : ps) p.param->zero_grad();
}

inline void check_conv(GradProbe& gp, std::size_t k, ConvGeometry geo) {
  Tensor x = gp.random({6, 7, 3});
  Tensor w = gp.random({k, k, 3, 4});
  Tensor b = gp.random({4});
  const Tensor r = gp.random(conv2d_output_shape(x.shape(), w.shape(), geo));
  auto op = [&] { return conv2d(x, w, &b, geo); };
  Tensor gw(w.shape()), gb(b.shape());
  const Tensor gx = conv2d_backward(x, w, r, geo, &gw, &gb);
  gp.check_map(op, r, x.values(), gx);
  gp.check_map(op, r, w.values(), gw);
  gp.check_map(op, r, b.values(), gb);
}

inline void check_conv1x1(GradProbe& gp) {
  Tensor x = gp.random({5, 5, 3});
  Tensor w = gp.random({1, 1, 3, 4});
  Tensor b = gp.random({4});
  const Tensor r = gp.random({5, 5, 4});
  auto op = [&] { return conv1x1(x, w, &b); };
  Tensor gw(w.shape()), gb(b.shape());
  const Tensor gx = conv2d_backward(x, w, r, {1, 0}, &gw, &gb);
  gp.check_map(op, r, x.values(), gx);
  gp.check_map(op, r, w.values(), gw);
  gp.check_map(op, r, b.values(), gb);
}

inline void check_max_pool(GradProbe& gp) {
  Tensor x = gp.random({6, 8, 3});
  const Tensor r = gp.random({3, 4, 3});
  auto op = [&] { return max_pool2x2(x); };
  std::vector<std::size_t> am;
  max_pool2x2(x, &am);
  gp.check_map(op, r, x.values(), max_pool2x2_backward(r, am, x.shape()));
}

inline void check_activation(GradProbe& gp, Activation kind) {
  Tensor x = gp.random({24}, 2.0);
  if (kind == Activation::Relu) avoid(x, 0.0, 1e-3);
  const Tensor r = gp.random({24});
  auto op = [&] { return activation(x, kind); };
  gp.check_map(op, r, x.values(), activation_backward(x, activation(x, kind), r, kind));
}

inline void check_fully_connected(GradProbe& gp) {
  Tensor x = gp.random({3, 5});
  Tensor w = gp.random({5, 4});
  Tensor b = gp.random({4});
  const Tensor r = gp.random({3, 4});
  auto op = [&] { return fully_connected(x, w, b); };
  Tensor gw(w.shape()), gb(b.shape());
  const Tensor gx = fully_connected_backward(x, w, r, &gw, &gb);
  gp.check_map(op, r, x.values(), gx);
  gp.check_map(op, r, w.values(), gw);
  gp.check_map(op, r, b.values(), gb);
}

inline void check_dropout(GradProbe& gp) {
  Tensor x = gp.random({24});
  const Tensor r = gp.random({24});
  const std::uint64_t mask_seed = gp.rng()();
  auto op = [&] {
    Rng m(mask_seed);
    return dropout(x, 0.3, Mode::Train, m);
  };
  Rng m(mask_seed);
  std::vector<double> mask;
  dropout(x, 0.3, Mode::Train, m, &mask);
  gp.check_map(op, r, x.values(), dropout_backward(r, mask));
}

inline void check_batch_norm(GradProbe& gp) {
  Tensor x = gp.random({6, 4}, 2.0);
  BatchNorm bn(4);
  bn.state.gamma.value = gp.random({4});
  bn.state.beta.value = gp.random({4});
  const Tensor r = gp.random({6, 4});
  auto op = [&] { return bn.forward(x, Mode::Train); };
  std::vector<NamedParam> ps;
  bn.collect(ps, "bn");
  op();
  const Tensor gx = bn.backward(r);
  gp.check_map(op, r, x.values(), gx);
  gp.check_params_map(op, r, ps);
}

inline void check_block(GradProbe& gp, BlockVariant v) {
  Tensor x = gp.random({5, 5, 3});
  ResidualBlock block(3, v);
  block.init(gp.rng());
  std::vector<NamedParam> ps;
  block.collect(ps, "block");
  for (auto& p : ps) {
    if (p.name.find("gamma") != std::string::npos || p.name.find("beta") != std::string::npos) {
      p.param->value = gp.random(p.param->value.shape());
    }
  }
  const Tensor r = gp.random({5, 5, 3});
  auto op = [&] { return block.forward(x, Mode::Train); };
  op();
  zero_grads(ps);
  const Tensor gx = block.backward(r);
  gp.check_map(op, r, x.values(), gx);
  gp.check_params_map(op, r, ps);
}

inline void check_cross_entropy(GradProbe& gp) {
  Tensor z = gp.random({5}, 2.0);
  const std::size_t target = std::uniform_int_distribution<std::size_t>(0, 4)(gp.rng());
  auto loss = [&] { return softmax_cross_entropy(z, target).loss; };
  gp.check(loss, z.values(), softmax_cross_entropy(z, target).grad);
}

inline void check_smooth_l1(GradProbe& gp) {
  Tensor p = gp.random({12}, 1.5);
  const Tensor t = gp.random({12}, 1.5);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    if (std::abs(std::abs(d) - 1.0) < 1e-3) p[i] += 0.01;
  }
  auto loss = [&] { return smooth_l1(p, t).loss; };
  gp.check(loss, p.values(), smooth_l1(p, t).grad);
}

inline void check_roi_pool(GradProbe& gp) {
  Tensor f = gp.random({8, 8, 3});
  std::uniform_real_distribution<double> u(0.0, 32.0);
  double x1 = u(gp.rng()), x2 = u(gp.rng()), y1 = u(gp.rng()), y2 = u(gp.rng());
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  const Box2D roi(x1, y1, x2 + 1.0, y2 + 1.0);
  RoiPool pool(4.0, 3, 3);
  const Tensor r = gp.random({1, 3, 3, 3});
  auto op = [&] { return pool.forward(f, {roi}); };
  op();
  gp.check_map(op, r, f.values(), pool.backward(r));
}

inline void check_rpn(GradProbe& gp) {
  const std::size_t k = 3, H = 3, W = 4;
  Tensor f = gp.random({H, W, 3});
  RpnHead head(3, 5, k);
  head.init(gp.rng(), 0.5);
  std::vector<NamedParam> ps;
  head.collect(ps, "rpn");
  for (auto& p : ps) p.param->value = gp.random(p.param->value.shape(), 0.5);

  const std::size_t A = H * W * k;
  std::vector<AnchorLabel> labels(A, AnchorLabel::ignore());
  std::vector<std::size_t> sampled;
  std::vector<BoxDelta> targets(A);
  std::uniform_int_distribution<int> kind(0, 2);
  std::normal_distribution<double> n(0.0, 0.5);
  for (std::size_t a = 0; a < A; ++a) {
    const int c = kind(gp.rng());
    labels[a] = c == 0 ? AnchorLabel::positive(0) : c == 1 ? AnchorLabel::negative() : AnchorLabel::ignore();
    targets[a] = {n(gp.rng()), n(gp.rng()), n(gp.rng()), n(gp.rng())};
    if (c != 2) sampled.push_back(a);
  }
  if (sampled.empty()) {
    labels[0] = AnchorLabel::negative();
    sampled.push_back(0);
  }
  auto loss = [&] {
    const RpnOutput o = head.forward(f);
    return rpn_loss(o.logits, o.deltas, labels, sampled, targets, 10.0, static_cast<double>(H * W)).total;
  };
  const RpnOutput o = head.forward(f);
  const RpnLoss rl = rpn_loss(o.logits, o.deltas, labels, sampled, targets, 10.0, static_cast<double>(H * W));
  zero_grads(ps);
  const Tensor gf = head.backward(rl.grad_logits, rl.grad_deltas);
  gp.check(loss, f.values(), gf);
  gp.check_params(loss, ps);
}

inline void check_prediction_head(GradProbe& gp) {
  const std::size_t R = 4, C = 3;
  Tensor pooled = gp.random({R, 2, 2, 3});
  PredictionHead head(12, 6, C, 0.3);
  head.init(gp.rng(), 0.5);
  std::vector<NamedParam> ps;
  head.collect(ps, "head");
  // Nonzero biases keep pre-activations off the relu kink even for rows
  // whose inputs are all dropped.
  for (auto& p : ps) p.param->value = gp.random(p.param->value.shape(), 0.5);
  std::vector<std::size_t> cls(R);
  std::vector<BoxDelta> tgt(R);
  std::normal_distribution<double> n(0.0, 0.5);
  for (std::size_t r = 0; r < R; ++r) {
    cls[r] = r % C;
    tgt[r] = {n(gp.rng()), n(gp.rng()), n(gp.rng()), n(gp.rng())};
  }
  const std::uint64_t mask_seed = gp.rng()();
  Tensor gl({R, C}), gd({R, 4 * C});
  auto loss = [&] {
    Rng m(mask_seed);
    const HeadOutput ho = head.forward(pooled, Mode::Train, m);
    double total = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
      const Tensor l({C}, std::vector<double>(ho.logits.data() + r * C, ho.logits.data() + (r + 1) * C));
      const Tensor d({4 * C}, std::vector<double>(ho.deltas.data() + r * 4 * C, ho.deltas.data() + (r + 1) * 4 * C));
      std::optional<BoxDelta> v;
      if (cls[r] >= 1) v = tgt[r];
      const DetLoss dl = detection_loss(l, d, cls[r], v, 1.0);
      total += dl.total / static_cast<double>(R);
      for (std::size_t c = 0; c < C; ++c) gl[r * C + c] = dl.grad_logits[c] / static_cast<double>(R);
      for (std::size_t c = 0; c < 4 * C; ++c) gd[r * 4 * C + c] = dl.grad_deltas[c] / static_cast<double>(R);
    }
    return total;
  };
  loss();
  zero_grads(ps);
  const Tensor gx = head.backward(gl, gd);
  gp.check(loss, pooled.values(), gx);
  gp.check_params(loss, ps);
}

inline void check_extractor(GradProbe& gp, BlockVariant v) {
  DetectorConfig cfg;
  cfg.extractor = v;
  cfg.stride = 4;
  cfg.stem_width = 3;
  cfg.channels = 4;
  cfg.depth = 2;
  FeatureExtractor ex(cfg);
  ex.init(gp.rng());
  std::vector<NamedParam> ps;
  ex.collect(ps, "extractor");
  Tensor x = gp.random({16, 16, 3});
  const Tensor r = gp.random({4, 4, ex.out_channels()});
  auto op = [&] { return ex.forward(x, Mode::Train); };
  op();
  zero_grads(ps);
  const Tensor gx = ex.backward(r);
  gp.check_map(op, r, x.values(), gx);
  gp.check_params_map(op, r, ps);
}

// Whole-detector loss on a 32x32 synthetic scene. Anchor labels, sampled
// anchors and RoIs are drawn once and then held fixed, and dropout masks are
// replayed from one seed, so the loss is a smooth function of the weights.
inline void check_end_to_end(GradProbe& gp) {
  DetectorConfig cfg;
  cfg.stride = 8;
  cfg.stem_width = 4;
  cfg.channels = 6;
  cfg.depth = 2;
  cfg.rpn_channels = 6;
  cfg.roi_pool_h = 3;
  cfg.roi_pool_w = 3;
  cfg.fc_hidden = 12;
  cfg.rois_per_image = 12;
  cfg.rpn_batch = 32;
  cfg.dropout = 0.25;
  cfg.head_init_std = 0.3;
  cfg.anchor_variant = AnchorVariant::Extended;

  SceneSpec spec;
  spec.width = 32;
  spec.height = 32;
  spec.min_objects = 1;
  spec.max_objects = 2;
  spec.min_size = 8;
  spec.max_size = 16;
  spec.seed = gp.rng()();
  const Scene scene = generate_synthetic_scene(spec);
  const PreparedImage img = prepare_image(scene.image, cfg.stride);
  std::vector<GroundTruthBox> gts;
  for (const auto& l : scene.labels) gts.push_back({l.bbox, 1});

  Detector model(cfg, gp.rng()());
  const std::uint64_t step_seed = gp.rng()();
  TrainingTargets targets;
  {
    Rng r(step_seed);
    compute_loss(model, img, gts, r, targets, false);
  }
  auto loss = [&] {
    Rng r(step_seed);
    return compute_loss(model, img, gts, r, targets, false).total;
  };
  model.zero_grad();
  {
    Rng r(step_seed);
    compute_loss(model, img, gts, r, targets, true);
  }
  gp.check_params(loss, model.parameters());
}

}  // namespace gradcheck_detail

struct GradCheckCase {
  std::string name;
  double tolerance;
  double eps;
  std::function<void(GradProbe&)> run;
  std::size_t max_probes = 0;
};

// Linear maps take a large step (no truncation error, less roundoff);
// piecewise-linear ones a moderate step to limit kink straddles.
inline std::vector<GradCheckCase> gradcheck_cases() {
  using namespace gradcheck_detail;
  constexpr double kOp = 1e-6;
  return {
      {"conv2d", kOp, 1e-2, [](GradProbe& g) { check_conv(g, 3, {2, 1}); }},
      {"conv1x1", kOp, 1e-2, [](GradProbe& g) { check_conv1x1(g); }},
      {"max_pool2x2", kOp, 1e-4, [](GradProbe& g) { check_max_pool(g); }},
      {"sigmoid", kOp, 1e-4, [](GradProbe& g) { check_activation(g, Activation::Sigmoid); }},
      {"tanh", kOp, 1e-4, [](GradProbe& g) { check_activation(g, Activation::Tanh); }},
      {"relu", kOp, 1e-4, [](GradProbe& g) { check_activation(g, Activation::Relu); }},
      {"fully_connected", kOp, 1e-2, [](GradProbe& g) { check_fully_connected(g); }},
      {"dropout", kOp, 1e-2, [](GradProbe& g) { check_dropout(g); }},
      {"batch_norm", kOp, 1e-4, [](GradProbe& g) { check_batch_norm(g); }},
      {"block_plain", kOp, 4e-4, [](GradProbe& g) { check_block(g, BlockVariant::Plain); }},
      {"block_residual_original", kOp, 4e-4, [](GradProbe& g) { check_block(g, BlockVariant::Original); }},
      {"block_residual_identity", kOp, 4e-4,
       [](GradProbe& g) { check_block(g, BlockVariant::IdentityMapping); }},
      {"softmax_cross_entropy", kOp, 1e-4, [](GradProbe& g) { check_cross_entropy(g); }},
      {"smooth_l1", kOp, 1e-4, [](GradProbe& g) { check_smooth_l1(g); }},
      {"roi_pool", kOp, 1e-4, [](GradProbe& g) { check_roi_pool(g); }},
      {"rpn_head_loss", kOp, 1e-4, [](GradProbe& g) { check_rpn(g); }},
      {"prediction_head_loss", kOp, 1e-4, [](GradProbe& g) { check_prediction_head(g); }},
      {"extractor_plain", kOp, 4e-4, [](GradProbe& g) { check_extractor(g, BlockVariant::Plain); }},
      {"extractor_residual_original", kOp, 4e-4,
       [](GradProbe& g) { check_extractor(g, BlockVariant::Original); }},
      {"extractor_residual_identity", kOp, 4e-4,
       [](GradProbe& g) { check_extractor(g, BlockVariant::IdentityMapping); }},
      {"end_to_end", 1e-5, 1e-4, [](GradProbe& g) { check_end_to_end(g); }, 6},
  };
}

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t seeds = 0;
  std::size_t redraws = 0;  // instances discarded for straddling a kink
  std::size_t requested = 0;
  bool passed() const { return seeds == requested && max_error < tolerance; }
};

struct GradCheckOptions {
  std::size_t seeds = 10;
  std::uint64_t base_seed = 1;
  double corrupt = 0.0;
  std::size_t max_redraws = 10;  // per seed
  std::vector<std::string> only;  // empty = every case
};

// Worst relative error per case over `seeds` differentiable instances.
inline std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opts) {
  if (opts.seeds == 0) fail("gradcheck: need at least one seed");
  const auto cases = gradcheck_cases();
  for (const auto& name : opts.only) {
    if (std::none_of(cases.begin(), cases.end(), [&](const GradCheckCase& c) { return c.name == name; })) {
      fail("gradcheck: unknown check '", name, "'");
    }
  }
  std::vector<GradCheckResult> out;
  for (const auto& c : cases) {
    if (!opts.only.empty() && std::find(opts.only.begin(), opts.only.end(), c.name) == opts.only.end()) continue;
    GradCheckResult r{c.name, 0.0, c.tolerance, 0, 0, opts.seeds};
    for (std::size_t s = 0; s < opts.seeds; ++s) {
      for (std::size_t attempt = 0; attempt <= opts.max_redraws; ++attempt) {
        GradProbe gp(mix_seed(mix_seed(opts.base_seed, s), attempt), c.tolerance, c.eps, opts.corrupt,
                     c.max_probes);
        try {
          c.run(gp);
        } catch (const NonDifferentiableProbe&) {
          ++r.redraws;
          continue;
        }
        r.max_error = std::max(r.max_error, gp.worst());
        ++r.seeds;
        break;
      }
      if (r.seeds != s + 1) r.max_error = std::numeric_limits<double>::infinity();
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace rpnforge
