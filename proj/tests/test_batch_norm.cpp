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

#include <cmath>

#include "test_support.hpp"

using namespace rpnforge;
using rpnforge::testing::random_tensor;

TEST(BatchNorm, OneTwoThree) {
  BatchNormState st(1, 0.0);
  const Tensor y = batch_norm(Tensor({3, 1}, std::vector<double>{1, 2, 3}), st, Mode::Train);
  const double z = std::sqrt(1.5);  // (x - 2) / sqrt(2/3)
  EXPECT_NEAR(y[0], -z, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], z, 1e-12);
  EXPECT_NEAR(z, 1.224744871391589, 1e-15);
}

TEST(BatchNorm, PerFeatureMeanZeroVarianceOne) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> nd(2, 40), fd(1, 6);
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t n = nd(rng), F = fd(rng);
    Tensor x = random_tensor(rng, {n, F}, 3.0);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += double(i % F) * 10.0;
    BatchNormState st(F, 0.0);
    const Tensor y = batch_norm(x, st, Mode::Train);
    for (std::size_t f = 0; f < F; ++f) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < n; ++i) m += y[i * F + f];
      m /= double(n);
      for (std::size_t i = 0; i < n; ++i) v += (y[i * F + f] - m) * (y[i * F + f] - m);
      v /= double(n);
      EXPECT_LE(std::abs(m), 1e-9);
      EXPECT_NEAR(v, 1.0, 1e-6);
    }
  }
}

TEST(BatchNorm, TinyEpsilonStillNormalizes) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor(rng, {30, 2}, 2.0);
  BatchNormState st(2, 1e-12);
  const Tensor y = batch_norm(x, st, Mode::Train);
  double v = 0;
  for (std::size_t i = 0; i < 30; ++i) v += y[i * 2] * y[i * 2];
  EXPECT_NEAR(v / 30, 1.0, 1e-6);
}

TEST(BatchNorm, ScaleShiftAndConstantBatch) {
  BatchNormState st(1, 1e-5);
  st.gamma.value[0] = 2.0;
  st.beta.value[0] = -1.0;
  const Tensor y = batch_norm(Tensor({3, 1}, std::vector<double>{4, 4, 4}), st, Mode::Train);
  for (double v : y.values()) EXPECT_EQ(v, -1.0);

  BatchNormState s2(1, 0.0);
  s2.gamma.value[0] = 3.0;
  s2.beta.value[0] = 0.5;
  const Tensor z = batch_norm(Tensor({2, 1}, std::vector<double>{0, 2}), s2, Mode::Train);
  EXPECT_NEAR(z[0], -2.5, 1e-12);
  EXPECT_NEAR(z[1], 3.5, 1e-12);
}

TEST(BatchNorm, RunningStatisticsAndEvalMode) {
  BatchNormState st(1, 0.0, 0.9);
  batch_norm(Tensor({3, 1}, std::vector<double>{1, 2, 3}), st, Mode::Train);
  EXPECT_NEAR(st.running_mean[0], 0.9 * 0.0 + 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(st.running_var[0], 0.9 * 1.0 + 0.1 * (2.0 / 3.0), 1e-15);

  st.running_mean[0] = 10.0;
  st.running_var[0] = 4.0;
  const BatchNormState before = st;
  const Tensor y = batch_norm(Tensor({1, 1}, std::vector<double>{14.0}), st, Mode::Eval);
  EXPECT_NEAR(y[0], 2.0, 1e-15);
  EXPECT_EQ(st.running_mean.storage(), before.running_mean.storage());
  EXPECT_EQ(st.running_var.storage(), before.running_var.storage());
}

TEST(BatchNorm, SpatialMapNormalizesPerChannel) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(rng, {5, 4, 3});
  BatchNormState st(3, 0.0);
  const Tensor y = batch_norm(x, st, Mode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0;
    for (std::size_t i = c; i < y.size(); i += 3) m += y[i];
    EXPECT_NEAR(m / 20.0, 0.0, 1e-12);
  }
}

TEST(BatchNorm, Errors) {
  BatchNormState st(2);
  EXPECT_THROW(batch_norm(Tensor({1, 2}), st, Mode::Train), Error);
  EXPECT_NO_THROW(batch_norm(Tensor({1, 2}), st, Mode::Eval));
  EXPECT_THROW(batch_norm(Tensor({4, 3}), st, Mode::Train), Error);
}
