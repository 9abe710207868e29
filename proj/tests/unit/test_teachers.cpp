// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oofkd/labeling.hpp"
#include "oofkd/synthetic.hpp"
#include "oofkd/teachers.hpp"
#include "oracles.hpp"

using namespace oofkd;

namespace {

Dataset tiny(std::vector<std::vector<double>> rows, std::vector<int> labels, int C) {
  Dataset ds;
  ds.name = "tiny";
  ds.features = Matrix(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) ds.features(i, j) = rows[i][j];
  ds.labels = std::move(labels);
  ds.n_classes = C;
  ds.row_ids.resize(rows.size());
  std::iota(ds.row_ids.begin(), ds.row_ids.end(), std::size_t{0});
  for (std::size_t j = 0; j < rows.front().size(); ++j) {
    ds.feature_names.push_back("x" + std::to_string(j));
    ds.categorical.push_back(false);
  }
  return ds;
}

void expect_simplex(const Matrix& p, double tol = 1e-9) {
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (double v : p.row(i)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, tol);
  }
}

Dataset separable(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds = tiny({{0.0, 0.0}}, {0}, 2);
  ds.features = Matrix(n, 2);
  ds.labels.resize(n);
  ds.row_ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    ds.features(i, 0) = (y ? 1.5 : -1.5) + 0.5 * rng.normal();
    ds.features(i, 1) = rng.normal();
    ds.labels[i] = y;
    ds.row_ids[i] = i;
  }
  return ds;
}

}  // namespace

TEST(Knn, LaplaceExample) {
  // Query at the origin; its three nearest neighbours are labelled 0, 0, 1.
  const auto ctx = tiny({{0.1}, {0.2}, {0.3}, {5.0}}, {0, 0, 1, 1}, 2);
  auto spec = TeacherSpec::knn(3, 1.0);
  spec.smoothing_mode = Smoothing::Laplace;
  const auto t = fit_teacher(spec, ctx);
  const auto q = tiny({{0.0}}, {0}, 2);
  const auto p = predict_proba(t, q);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.4);
}

TEST(Knn, MixtureSmoothing) {
  const auto ctx = tiny({{0.1}, {0.2}, {0.3}, {5.0}}, {0, 0, 1, 1}, 2);
  const auto t = fit_teacher(TeacherSpec::knn(3, 0.3), ctx);
  const auto p = predict_proba(t, tiny({{0.0}}, {0}, 2));
  EXPECT_DOUBLE_EQ(p(0, 0), 0.7 * 2.0 / 3.0 + 0.15);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.7 / 3.0 + 0.15);
}

TEST(Knn, FitStoresContextWithoutFitting) {
  const auto ctx = tiny({{1.0}, {2.0}, {3.0}}, {0, 1, 2}, 3);
  const auto t = fit_teacher(TeacherSpec::knn(1), ctx);
  EXPECT_EQ(t.context_x, ctx.features);
  EXPECT_EQ(t.context_ids, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Knn, TiesBrokenByLowerRowId) {
  auto ctx = tiny({{1.0}, {-1.0}}, {1, 0}, 2);
  ctx.row_ids = {9, 4};
  const auto t = fit_teacher(TeacherSpec::knn(1, 0.0), ctx);
  const auto p = predict_proba(t, tiny({{0.0}}, {0}, 2));
  EXPECT_EQ(p(0, 0), 1.0);  // row id 4 wins the tie
}

TEST(Knn, InContextSelfRecall) {
  const auto ctx = tiny({{0.0}, {1.0}, {2.0}, {3.0}, {4.0}}, {0, 1, 2, 3, 4}, 5);
  const auto t = fit_teacher(TeacherSpec::knn(1, 0.0), ctx);
  const auto p = predict_in_context(t, ctx);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(p(i, c), i == c ? 1.0 : 0.0);
  EXPECT_EQ(entropy(p.row(2)), 0.0);
}

TEST(Knn, InContextEntropyMatchesOracle) {
  const auto ctx = tiny({{0.0}, {1.0}, {2.0}, {3.0}, {4.0}}, {0, 1, 2, 3, 4}, 5);
  const auto mix = predict_in_context(fit_teacher(TeacherSpec::knn(1, 1e-3), ctx), ctx);
  EXPECT_NEAR(entropy(mix.row(0)), oracle::kKnnMixtureEntropy, 1e-12);
  EXPECT_LT(entropy(mix.row(0)), 1e-2);
  auto lap = TeacherSpec::knn(1, 1e-3);
  lap.smoothing_mode = Smoothing::Laplace;
  const auto pl = predict_in_context(fit_teacher(lap, ctx), ctx);
  EXPECT_NEAR(entropy(pl.row(0)), oracle::kKnnLaplaceEntropy, 1e-12);
}

TEST(Knn, LeakageContrastOnDistinctRows) {
  MixtureSpec ms;
  ms.n = 400;
  ms.d = 4;
  ms.classes = 3;
  ms.separation = 0.7;
  ms.seed = 8;
  const auto ds = make_mixture(ms);
  const auto plan = make_folds(ds.labels, 5, 2);
  const std::vector<TeacherSpec> k1{TeacherSpec::knn(1)};
  const double leaky = mean_entropy(collect_leaky(ds, k1, 0));
  const std::vector<TeacherSpec> k5{TeacherSpec::knn(5)};
  const double oof = mean_entropy(collect_oof(ds, plan, k5, 0));
  EXPECT_LT(leaky, 1e-2);
  EXPECT_GT(oof, 0.3);
}

TEST(Knn, InContextRejectsOutsideRows) {
  auto ctx = tiny({{0.0}, {1.0}}, {0, 1}, 2);
  const auto t = fit_teacher(TeacherSpec::knn(1), ctx);
  auto q = tiny({{0.5}}, {0}, 2);
  q.row_ids = {5};
  EXPECT_THROW(predict_in_context(t, q), Error);
}

TEST(Logistic, ZeroWeightsGiveUniform) {
  const auto ctx = tiny({{0.0}, {1.0}, {2.0}, {3.0}}, {0, 1, 2, 3}, 4);
  auto t = fit_teacher(TeacherSpec::logistic(), ctx);
  t.weights = Matrix(2, 4, 0.0);
  const auto p = predict_proba(t, ctx);
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Logistic, SeparableTrainingAccuracyIsOne) {
  const auto ds = separable(200, 1);
  auto spec = TeacherSpec::logistic();
  spec.max_iter = 2000;
  const auto t = fit_teacher(spec, ds);
  const auto p = predict_proba(t, ds);
  expect_simplex(p);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int pred = p(i, 1) > p(i, 0) ? 1 : 0;
    EXPECT_EQ(pred, ds.labels[i]) << "row " << i;
  }
}

TEST(Logistic, GradientDescentMatchesDirectOracle) {
  // Two rows, one feature, C=2: a few hand-rolled GD steps on the standardized
  // design reproduce the fitted weights.
  const auto ds = tiny({{-1.0}, {1.0}}, {0, 1}, 2);
  auto spec = TeacherSpec::logistic();
  spec.max_iter = 3;
  spec.l2 = 0.0;
  spec.tol = 0.0;
  spec.step = 0.5;
  const auto t = fit_teacher(spec, ds);
  double w[2][2] = {{0, 0}, {0, 0}};  // [feature, bias][class]
  const double x[2] = {-1.0, 1.0};
  const int y[2] = {0, 1};
  for (int it = 0; it < 3; ++it) {
    double g[2][2] = {{0, 0}, {0, 0}};
    for (int i = 0; i < 2; ++i) {
      const double z0 = w[0][0] * x[i] + w[1][0], z1 = w[0][1] * x[i] + w[1][1];
      const double p1 = 1.0 / (1.0 + std::exp(z0 - z1));
      const double r[2] = {1.0 - p1 - (y[i] == 0), p1 - (y[i] == 1)};
      for (int c = 0; c < 2; ++c) {
        g[0][c] += x[i] * r[c] / 2.0;
        g[1][c] += r[c] / 2.0;
      }
    }
    for (int a = 0; a < 2; ++a)
      for (int c = 0; c < 2; ++c) w[a][c] -= 0.5 * g[a][c];
  }
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(t.weights(static_cast<std::size_t>(a), static_cast<std::size_t>(c)), w[a][c], 1e-14);
  EXPECT_FALSE(t.converged);
  EXPECT_EQ(t.iterations, 3);
}

TEST(Logistic, InContextSharperThanOutOfFold) {
  MixtureSpec ms;
  ms.n = 300;
  ms.d = 5;
  ms.classes = 2;
  ms.separation = 1.5;
  ms.seed = 4;
  const auto ds = make_mixture(ms);
  const std::vector<TeacherSpec> lr{TeacherSpec::logistic()};
  const double leaky = mean_entropy(collect_leaky(ds, lr, 0));
  const double oof = mean_entropy(collect_oof(ds, make_folds(ds.labels, 5, 1), lr, 0));
  EXPECT_LT(leaky, oof);
}

TEST(Teachers, DeterministicPredictions) {
  MixtureSpec ms;
  ms.n = 100;
  const auto ds = make_mixture(ms);
  for (const auto& spec : {TeacherSpec::knn(5), TeacherSpec::logistic()}) {
    const auto a = predict_proba(fit_teacher(spec, ds, 1), ds);
    const auto b = predict_proba(fit_teacher(spec, ds, 1), ds);
    EXPECT_EQ(a, b);
    expect_simplex(a);
  }
}

TEST(Teachers, Errors) {
  const auto ctx = tiny({{0.0}, {1.0}}, {0, 0}, 2);
  EXPECT_THROW(fit_teacher(TeacherSpec::knn(1), ctx), Error);  // class 1 missing
  Dataset empty = tiny({{0.0}}, {0}, 2);
  empty.features = Matrix(0, 1);
  empty.labels.clear();
  empty.row_ids.clear();
  EXPECT_THROW(fit_teacher(TeacherSpec::knn(1), empty), Error);
  EXPECT_THROW(fit_teacher(TeacherSpec::knn(0), tiny({{0.0}, {1.0}}, {0, 1}, 2)), Error);
  const auto t = fit_teacher(TeacherSpec::knn(1), tiny({{0.0}, {1.0}}, {0, 1}, 2));
  EXPECT_THROW(predict_proba(t, tiny({{0.0, 1.0}}, {0}, 2)), Error);
  EXPECT_THROW(fit_teacher(TeacherSpec::cache("/nonexistent/cache.csv", "ext"), ctx), Error);
}

TEST(CacheTeacher, ReturnsStoredVectorsAndChecksFold) {
  const auto ds = tiny({{0}, {1}, {2}, {3}, {4}, {5}}, {0, 1, 0, 1, 0, 1}, 2);
  const auto plan = make_folds(ds.labels, 3, 1);
  Matrix probs(6, 2);
  for (std::size_t i = 0; i < 6; ++i) {
    probs(i, 0) = 0.1 * static_cast<double>(i + 1);
    probs(i, 1) = 1.0 - probs(i, 0);
  }
  const auto path = (std::filesystem::temp_directory_path() / "oofkd_cache_teacher.csv").string();
  {
    std::ofstream f(path);
    write_cache(f, probs, plan, "tiny", "ext");
  }
  const auto t = fit_teacher(TeacherSpec::cache(path, "ext"), ds);
  const int fold0 = plan.assignment[0];
  const std::vector<std::size_t> rows = plan.fold_rows(fold0);
  const auto q = subset(ds, rows);
  const auto p = predict_proba(t, q, fold0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    EXPECT_NEAR(p(r, 0), probs(rows[r], 0), 1e-9);
    EXPECT_NEAR(p(r, 1), probs(rows[r], 1), 1e-9);
  }
  EXPECT_THROW(predict_proba(t, q, (fold0 + 1) % 3), Error);
  EXPECT_THROW(predict_in_context(t, q), Error);
  std::remove(path.c_str());
}
