// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "oofkd/labeling.hpp"
#include "oofkd/loss.hpp"
#include "oofkd/random.hpp"
#include "oracles.hpp"

using namespace oofkd;

namespace {

SoftLabelSet labels_with(std::vector<std::vector<double>> rows, std::vector<double> T, std::vector<double> w) {
  SoftLabelSet s;
  s.probs = Matrix(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c) s.probs(i, c) = rows[i][c];
  s.temperature = std::move(T);
  s.weight = std::move(w);
  s.entropy.resize(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) s.entropy[i] = entropy(s.probs.row(i));
  return s;
}

Matrix row_softmax(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto q = softmax(z.row(i));
    std::copy(q.begin(), q.end(), p.row(i).begin());
  }
  return p;
}

std::vector<double> dirichlet_like(Rng& rng, std::size_t C) {
  std::vector<double> p(C);
  double s = 0.0;
  for (auto& v : p) {
    v = -std::log(1.0 - rng.uniform()) + 0.05;
    s += v;
  }
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace

TEST(Temper, Examples) {
  const std::vector<double> p{0.8, 0.2};
  const auto t = temper(p, 2.0);
  EXPECT_NEAR(t[0], oracle::kTemper08T2[0], 1e-15);
  EXPECT_NEAR(t[1], oracle::kTemper08T2[1], 1e-15);
  const auto u = temper(std::vector<double>{0.6, 0.4}, 2.0);
  EXPECT_NEAR(u[0], oracle::kTemper06T2[0], 1e-15);
  const auto same = temper(p, 1.0);
  EXPECT_NEAR(same[0], 0.8, 1e-15);
  EXPECT_THROW(temper(p, 0.5), Error);
}

TEST(Temper, PreservesArgmaxAndFlattens) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = 2 + rng.below(9);
    const auto p = dirichlet_like(rng, C);
    const double T = 1.0 + 4.0 * rng.uniform();
    const auto t = temper(p, T);
    EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), std::max_element(t.begin(), t.end()) - t.begin());
    EXPECT_GE(entropy(t), entropy(p) - 1e-12);
  }
}

TEST(Kl, Examples) {
  const std::vector<double> p{0.5, 0.5}, q{0.75, 0.25};
  EXPECT_NEAR(kl(p, q), oracle::kKlHalfVsThreeQuarter, 1e-15);
  EXPECT_EQ(kl(p, p), 0.0);
  // 0 ln 0 = 0, and q = 0 is floored rather than producing infinity.
  const std::vector<double> one_hot{1.0, 0.0}, zero_q{0.0, 1.0};
  EXPECT_NEAR(kl(one_hot, zero_q), -std::log(1e-6), 1e-9);
  EXPECT_THROW(kl(p, std::vector<double>{1.0}), Error);
}

TEST(SmoothTarget, Examples) {
  const auto t = smooth_target(1, 4, 0.1);
  EXPECT_DOUBLE_EQ(t[0], 0.025);
  EXPECT_DOUBLE_EQ(t[1], 0.925);
  const auto h = smooth_target(0, 3, 0.0);
  EXPECT_EQ(h, (std::vector<double>{1.0, 0.0, 0.0}));
}

TEST(MixedLoss, WorkedExample) {
  // p = (0.8, 0.2), q = (0.6, 0.4), y = 0, T = 2, w = 1, alpha = 0.7.
  const auto s = labels_with({{0.8, 0.2}}, {2.0}, {1.0});
  Matrix q(1, 2);
  q(0, 0) = 0.6;
  q(0, 1) = 0.4;
  const std::vector<int> y{0};
  EXPECT_NEAR(mixed_loss(s, q, y, LossConfig{}), oracle::kMixedLossExample, 1e-14);
}

TEST(MixedLoss, AlphaEndpoints) {
  const auto s = labels_with({{0.8, 0.2}, {0.3, 0.7}}, {2.0, 1.5}, {0.5, 1.0});
  Matrix q(2, 2);
  q(0, 0) = 0.6;
  q(0, 1) = 0.4;
  q(1, 0) = 0.1;
  q(1, 1) = 0.9;
  const std::vector<int> y{0, 1};
  LossConfig hard;
  hard.alpha = 0.0;
  EXPECT_NEAR(mixed_loss(s, q, y, hard), -0.5 * std::log(0.6) - std::log(0.9), 1e-14);
  LossConfig soft;
  soft.alpha = 1.0;
  const double expect = 0.5 * 4.0 * kl(temper(s.probs.row(0), 2.0), temper(q.row(0), 2.0)) +
                        2.25 * kl(temper(s.probs.row(1), 1.5), temper(q.row(1), 1.5));
  EXPECT_NEAR(mixed_loss(s, q, y, soft), expect, 1e-14);
}

TEST(MixedLoss, HardOnlySkipsKl) {
  const auto s = labels_with({{0.8, 0.2}}, {2.0}, {1.0});
  Matrix z(1, 2, 0.3);
  const std::vector<int> y{1};
  LossConfig hard;
  hard.alpha = 0.0;
  kl_evaluations() = 0;
  mixed_loss(s, row_softmax(z), y, hard);
  mixed_loss_grad(s, z, y, hard);
  EXPECT_EQ(kl_evaluations(), 0);
  mixed_loss(s, row_softmax(z), y, LossConfig{});
  EXPECT_GT(kl_evaluations(), 0);
}

TEST(MixedLoss, LinearInWeights) {
  Rng rng(5);
  const auto base = labels_with({{0.7, 0.2, 0.1}, {0.1, 0.1, 0.8}}, {1.7, 3.2}, {0.4, 0.9});
  Matrix q(2, 3);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto r = dirichlet_like(rng, 3);
    std::copy(r.begin(), r.end(), q.row(i).begin());
  }
  const std::vector<int> y{0, 2};
  for (double lambda : {0.0, 0.5, 3.0}) {
    auto scaled = base;
    for (auto& w : scaled.weight) w *= lambda;
    EXPECT_NEAR(mixed_loss(scaled, q, y, LossConfig{}), lambda * mixed_loss(base, q, y, LossConfig{}), 1e-13);
  }
}

TEST(MixedLoss, MeanIsSumOverN) {
  const auto s = labels_with({{0.7, 0.3}, {0.4, 0.6}, {0.5, 0.5}}, {1.0, 2.0, 3.0}, {1.0, 0.5, 0.2});
  Matrix z(3, 2);
  z(0, 0) = 0.4;
  z(1, 1) = -1.0;
  z(2, 0) = 2.0;
  const std::vector<int> y{0, 1, 0};
  LossConfig mean;
  mean.reduction = Reduction::Mean;
  EXPECT_NEAR(mixed_loss(s, row_softmax(z), y, mean), mixed_loss(s, row_softmax(z), y, LossConfig{}) / 3.0, 1e-15);
  const auto gs = mixed_loss_grad(s, z, y, LossConfig{});
  const auto gm = mixed_loss_grad(s, z, y, mean);
  for (std::size_t v = 0; v < gs.values().size(); ++v) EXPECT_NEAR(gm.values()[v], gs.values()[v] / 3.0, 1e-15);
}

TEST(MixedLoss, GradientMatchesFiniteDifferences) {
  Rng rng(17);
  int instances = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t C = 2 + static_cast<std::size_t>(trial % 9);
    const std::size_t n = 1 + rng.below(3);
    SoftLabelSet s;
    s.probs = Matrix(n, C);
    Matrix z(n, C);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = dirichlet_like(rng, C);
      std::copy(p.begin(), p.end(), s.probs.row(i).begin());
      for (std::size_t c = 0; c < C; ++c) z(i, c) = 2.0 * rng.normal();
      y[i] = static_cast<int>(rng.below(C));
      s.temperature.push_back(1.0 + 4.0 * rng.uniform());
      s.weight.push_back(0.05 + rng.uniform());
      s.entropy.push_back(entropy(s.probs.row(i)));
    }
    LossConfig cfg;
    cfg.alpha = rng.uniform();
    cfg.label_smoothing = trial % 2 ? 0.1 : 0.0;
    cfg.reduction = trial % 3 ? Reduction::Sum : Reduction::Mean;
    const auto g = mixed_loss_grad(s, z, y, cfg);
    const double h = 1e-6;
    for (std::size_t v = 0; v < z.values().size(); ++v) {
      Matrix zp = z, zm = z;
      zp.values()[v] += h;
      zm.values()[v] -= h;
      const double fd = (mixed_loss(s, row_softmax(zp), y, cfg) - mixed_loss(s, row_softmax(zm), y, cfg)) / (2 * h);
      EXPECT_NEAR(g.values()[v], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "trial " << trial << " entry " << v;
    }
    ++instances;
  }
  EXPECT_GE(instances, 100);
}

TEST(MixedLoss, GradientVanishesAtTheTarget) {
  // A student that already matches the teacher at alpha = 1 has zero gradient.
  const auto s = labels_with({{0.2, 0.3, 0.5}}, {2.5}, {0.7});
  Matrix z(1, 3);
  for (std::size_t c = 0; c < 3; ++c) z(0, c) = std::log(s.probs(0, c));
  LossConfig soft;
  soft.alpha = 1.0;
  const std::vector<int> y{2};
  const auto g = mixed_loss_grad(s, z, y, soft);
  for (double v : g.values()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(MixedLoss, Errors) {
  auto s = labels_with({{0.5, 0.5}}, {1.0}, {1.0});
  const std::vector<int> y{0};
  EXPECT_THROW(mixed_loss(s, Matrix(2, 2, 0.5), y, LossConfig{}), Error);
  EXPECT_THROW(mixed_loss(s, Matrix(1, 3, 0.3), y, LossConfig{}), Error);
  Matrix z(1, 2, 0.0);
  z(0, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(mixed_loss_grad(s, z, y, LossConfig{}), Error);
  s.temperature.clear();
  EXPECT_THROW(mixed_loss(s, Matrix(1, 2, 0.5), y, LossConfig{}), Error);
  s.temperature = {0.5};
  EXPECT_THROW(mixed_loss(s, Matrix(1, 2, 0.5), y, LossConfig{}), Error);
}

TEST(Entropy, Examples) {
  EXPECT_EQ(entropy(std::vector<double>{1.0, 0.0}), 0.0);
  EXPECT_NEAR(entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-15);
}
