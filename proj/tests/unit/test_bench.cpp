// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "oofkd/bench.hpp"
#include "oofkd/gbdt.hpp"
#include "oofkd/random.hpp"

using namespace oofkd;

namespace {

// Work proportional to `units` per row, returning a one-column result.
Matrix busy(const Matrix& x, int units) {
  Matrix out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double acc = x(i, 0);
    for (int u = 0; u < units; ++u) acc = std::sin(acc) + 1e-3 * u;
    out(i, 0) = acc;
  }
  return out;
}

}  // namespace

TEST(Bench, MacroMeanAndSpeedup) {
  const std::vector<double> ms{1.0, 2.0, 6.0};
  EXPECT_DOUBLE_EQ(macro_mean(ms), 3.0);
  EXPECT_EQ(macro_mean({}), 0.0);
  EXPECT_NEAR(speedup(151.0, 1.9), 79.47368421052632, 1e-12);
  EXPECT_THROW(speedup(151.0, 0.0), Error);
}

TEST(Bench, MakeBatchCyclesRows) {
  Matrix x(3, 2);
  for (std::size_t i = 0; i < 3; ++i) x(i, 0) = static_cast<double>(i);
  const auto b = make_batch(x, 1000);
  EXPECT_EQ(b.rows(), 1000u);
  EXPECT_EQ(b(998, 0), 2.0);
  EXPECT_EQ(b(999, 0), 0.0);
  EXPECT_THROW(make_batch(Matrix(0, 2), 10), Error);
}

TEST(Bench, SamplesAreConsistent) {
  Matrix x(50, 1, 0.3);
  BenchConfig cfg;
  cfg.batch_size = 200;
  cfg.warmup = 2;
  cfg.iters = 15;
  const auto rep = measure_latency("busy", {{"a", x}, {"b", x}}, [](const Matrix& m) { return busy(m, 20); }, cfg);
  ASSERT_EQ(rep.per_dataset.size(), 2u);
  for (const auto& s : rep.per_dataset) {
    EXPECT_EQ(s.samples_ms.size(), 15u);
    EXPECT_GE(s.mean_ms, s.min_ms);
    EXPECT_LE(s.mean_ms, s.max_ms);
    EXPECT_GT(s.min_ms, 0.0);
    EXPECT_EQ(s.thread_activations, 0);
  }
  EXPECT_DOUBLE_EQ(rep.macro_mean_ms, 0.5 * (rep.per_dataset[0].mean_ms + rep.per_dataset[1].mean_ms));
  EXPECT_EQ(rep.batch_size, 200u);
  EXPECT_EQ(rep.measured_iters, 15);
}

TEST(Bench, TinyBatchesAreRepeatedInsideASample) {
  Matrix x(1, 1, 0.1);
  BenchConfig cfg;
  cfg.batch_size = 1;
  cfg.iters = 5;
  cfg.min_sample_ms = 1.0;
  const auto s = time_batch("t", make_batch(x, 1), [](const Matrix& m) { return m; }, cfg);
  EXPECT_GT(s.inner_reps, 1);
}

TEST(Bench, DoubleTheWorkTakesLonger) {
  Matrix x(100, 1, 0.2);
  BenchConfig cfg;
  cfg.batch_size = 500;
  cfg.warmup = 3;
  cfg.iters = 20;
  const auto one = measure_latency("x1", {{"d", x}}, [](const Matrix& m) { return busy(m, 100); }, cfg);
  const auto two = measure_latency("x2", {{"d", x}}, [](const Matrix& m) { return busy(m, 200); }, cfg);
  EXPECT_GT(two.macro_mean_ms, 1.3 * one.macro_mean_ms);
}

TEST(Bench, TreePredictionStaysOnTheCallingThread) {
  Rng rng(1);
  Matrix x(300, 4), z(300, 2);
  for (auto& v : x.values()) v = rng.normal();
  for (std::size_t i = 0; i < 300; ++i) z(i, 0) = -(z(i, 1) = x(i, 0) > 0 ? 1.0 : -1.0);
  GbdtConfig gc;
  gc.n_rounds = 20;
  const auto m = fit_gbdt(x, z, std::vector<double>(300, 1.0), gc);
  BenchConfig cfg;
  cfg.iters = 5;
  cfg.warmup = 1;
  cfg.pin_core = true;
  const auto rep = measure_latency("gbdt", {{"d", x}}, [&m](const Matrix& b) { return predict_gbdt(m, b); }, cfg);
  EXPECT_EQ(rep.per_dataset[0].thread_activations, 0);
}

TEST(Bench, Errors) {
  Matrix x(5, 1, 0.0);
  BenchConfig cfg;
  cfg.iters = 0;
  EXPECT_THROW(time_batch("t", x, [](const Matrix& m) { return m; }, cfg), Error);
  EXPECT_THROW(measure_latency("m", {}, [](const Matrix& m) { return m; }), Error);
}
