// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "oofkd/cache.hpp"
#include "oofkd/labeling.hpp"
#include "oofkd/synthetic.hpp"
#include "oracles.hpp"

using namespace oofkd;

namespace {

Dataset mixture(std::size_t n, int C, std::uint64_t seed, double sep = 0.8) {
  MixtureSpec ms;
  ms.n = n;
  ms.d = 4;
  ms.classes = C;
  ms.separation = sep;
  ms.seed = seed;
  return make_mixture(ms);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// A cache file whose every row holds `row`.
std::string constant_cache(const Dataset& ds, const FoldPlan& plan, std::vector<double> row, const std::string& name) {
  Matrix p(ds.size(), row.size());
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t c = 0; c < row.size(); ++c) p(i, c) = row[c];
  const auto path = temp_path("oofkd_" + name + ".csv");
  std::ofstream f(path);
  write_cache(f, p, plan, ds.name, name);
  return path;
}

}  // namespace

TEST(Oof, NoTeacherSeesTheRowsItLabels) {
  const auto ds = mixture(250, 3, 1);
  const auto plan = make_folds(ds.labels, 5, 9);
  const std::vector<TeacherSpec> specs{TeacherSpec::knn(7), TeacherSpec::logistic()};
  std::vector<TeacherFitRecord> audit;
  const auto labels = collect_oof(ds, plan, specs, 3, &audit);
  ASSERT_EQ(audit.size(), 10u);
  std::set<std::size_t> labeled_once;
  for (const auto& r : audit) {
    const std::set<std::size_t> ctx(r.context_ids.begin(), r.context_ids.end());
    for (auto id : r.labeled_ids) {
      EXPECT_EQ(ctx.count(id), 0u) << r.teacher << " fold " << r.fold << " row " << id;
      EXPECT_EQ(plan.assignment[id], r.fold);
    }
    EXPECT_EQ(ctx.size() + r.labeled_ids.size(), ds.size());
    if (r.teacher == "knn") labeled_once.insert(r.labeled_ids.begin(), r.labeled_ids.end());
  }
  EXPECT_EQ(labeled_once.size(), ds.size());
  EXPECT_EQ(labels.source_fold, plan.assignment);
  EXPECT_EQ(labels.provenance.fold_plan_hash, plan.hash_hex());
  EXPECT_FALSE(labels.provenance.leaky);
}

TEST(Oof, RowsOnTheSimplex) {
  const auto ds = mixture(200, 4, 2);
  const auto plan = make_folds(ds.labels, 5, 1);
  const std::vector<TeacherSpec> specs{TeacherSpec::knn(5), TeacherSpec::logistic()};
  const auto labels = collect_oof(ds, plan, specs, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double s = 0.0;
    for (double v : labels.probs.row(i)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Oof, MultiTeacherIsTheEqualWeightMean) {
  const auto ds = mixture(150, 3, 4);
  const auto plan = make_folds(ds.labels, 5, 2);
  const std::vector<TeacherSpec> a{TeacherSpec::knn(5)}, b{TeacherSpec::logistic()};
  const std::vector<TeacherSpec> ab{TeacherSpec::knn(5), TeacherSpec::logistic()};
  const auto pa = collect_oof(ds, plan, a, 0), pb = collect_oof(ds, plan, b, 0), pab = collect_oof(ds, plan, ab, 0);
  for (std::size_t v = 0; v < pab.probs.values().size(); ++v)
    EXPECT_NEAR(pab.probs.values()[v], 0.5 * (pa.probs.values()[v] + pb.probs.values()[v]), 1e-12);
  EXPECT_EQ(pab.provenance.teachers, (std::vector<std::string>{"knn", "logreg"}));
}

TEST(Oof, AveragingExamplesWithCachedTeachers) {
  auto ds = mixture(40, 2, 5);
  ds.name = "avg";
  const auto plan = make_folds(ds.labels, 5, 0);
  const auto p1 = constant_cache(ds, plan, {0.9, 0.1}, "t1");
  const auto p2 = constant_cache(ds, plan, {0.5, 0.5}, "t2");
  const auto p3 = constant_cache(ds, plan, {0.2, 0.8}, "t3");
  const std::vector<TeacherSpec> two{TeacherSpec::cache(p1, "t1"), TeacherSpec::cache(p2, "t2")};
  const auto l2 = collect_oof(ds, plan, two, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_NEAR(l2.probs(i, 0), 0.7, 1e-9);
    EXPECT_NEAR(l2.probs(i, 1), 0.3, 1e-9);
  }
  const std::vector<TeacherSpec> three{TeacherSpec::cache(p1, "t1"), TeacherSpec::cache(p2, "t2"),
                                       TeacherSpec::cache(p3, "t3")};
  const auto l3 = collect_oof(ds, plan, three, 0);
  EXPECT_NEAR(l3.probs(0, 0), 1.6 / 3.0, 1e-9);
  EXPECT_NEAR(l3.probs(0, 1), 1.4 / 3.0, 1e-9);
  for (const auto& p : {p1, p2, p3}) std::remove(p.c_str());
}

TEST(Oof, WorkerCountDoesNotChangeLabels) {
  const auto ds = mixture(300, 3, 6);
  const auto plan = make_folds(ds.labels, 5, 3);
  const std::vector<TeacherSpec> specs{TeacherSpec::knn(9), TeacherSpec::logistic()};
  const auto one = collect_oof(ds, plan, specs, 7, nullptr, 1);
  const auto three = collect_oof(ds, plan, specs, 7, nullptr, 3);
  EXPECT_EQ(one.probs, three.probs);
}

TEST(Oof, Errors) {
  const auto ds = mixture(60, 2, 7);
  const auto plan = make_folds(ds.labels, 5, 3);
  EXPECT_THROW(collect_oof(ds, plan, {}, 0), Error);
  const auto other = make_folds(std::vector<int>(ds.labels.begin(), ds.labels.begin() + 50), 5, 3);
  const std::vector<TeacherSpec> k{TeacherSpec::knn(3)};
  EXPECT_THROW(collect_oof(ds, other, k, 0), Error);
  const std::vector<TeacherSpec> c{TeacherSpec::cache("/nonexistent.csv", "ext")};
  EXPECT_THROW(collect_leaky(ds, c, 0), Error);
}

TEST(Leaky, ProvenanceMarksLeak) {
  const auto ds = mixture(60, 2, 8);
  const std::vector<TeacherSpec> k{TeacherSpec::knn(1)};
  const auto l = collect_leaky(ds, k, 0);
  EXPECT_TRUE(l.provenance.leaky);
  EXPECT_TRUE(std::all_of(l.source_fold.begin(), l.source_fold.end(), [](int f) { return f == -1; }));
}

TEST(Annotate, ClosedFormsAtTheEndpoints) {
  const AnnotationConfig cfg;
  EXPECT_DOUBLE_EQ(annotation_temperature(0.0, 5, cfg), 1.0);
  EXPECT_DOUBLE_EQ(annotation_temperature(std::log(5.0), 5, cfg), 5.0);
  EXPECT_DOUBLE_EQ(annotation_temperature(0.5 * std::log(4.0), 4, cfg), 3.0);
  EXPECT_NEAR(annotation_weight(0.0, cfg), oracle::kWeightAtZero, 1e-15);
  EXPECT_DOUBLE_EQ(annotation_weight(0.7, cfg), 1.0);
  EXPECT_NEAR(annotation_weight(0.9, cfg), std::exp(-0.5), 1e-15);
}

TEST(Annotate, BoundsAndMonotoneTemperature) {
  const AnnotationConfig cfg;
  for (int C = 2; C <= 10; ++C) {
    double prev_t = 0.0;
    for (int s = 0; s <= 200; ++s) {
      const double H = std::log(static_cast<double>(C)) * s / 200.0;
      const double T = annotation_temperature(H, C, cfg);
      EXPECT_GE(T, cfg.t_min);
      EXPECT_LE(T, cfg.t_max);
      EXPECT_GE(T, prev_t);
      prev_t = T;
      const double w = annotation_weight(H, cfg);
      EXPECT_GT(w, 0.0);
      EXPECT_LE(w, 1.0);
    }
  }
  // Entropy past ln C cannot occur but the map still clamps.
  EXPECT_DOUBLE_EQ(annotation_temperature(10.0, 2, cfg), cfg.t_max);
}

TEST(Annotate, FillsEveryRow) {
  SoftLabelSet s;
  s.probs = Matrix(3, 2);
  const double rows[3][2] = {{1.0, 0.0}, {0.5, 0.5}, {0.8, 0.2}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c) s.probs(i, c) = rows[i][c];
  const auto a = annotate(s, AnnotationConfig{}, 2);
  ASSERT_TRUE(a.annotated());
  EXPECT_EQ(a.entropy[0], 0.0);
  EXPECT_DOUBLE_EQ(a.temperature[0], 1.0);
  EXPECT_NEAR(a.entropy[1], std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(a.temperature[1], 5.0);
  const double h = -(0.8 * std::log(0.8) + 0.2 * std::log(0.2));
  EXPECT_NEAR(a.temperature[2], 1.0 + 4.0 * h / std::log(2.0), 1e-12);
}

TEST(Annotate, SwitchesAndValidation) {
  SoftLabelSet s;
  s.probs = Matrix(1, 2, 0.5);
  AnnotationConfig cfg;
  cfg.adaptive_temperature = false;
  cfg.confidence_weighting = false;
  const auto a = annotate(s, cfg, 2);
  EXPECT_EQ(a.temperature[0], 3.0);
  EXPECT_EQ(a.weight[0], 1.0);
  AnnotationConfig bad;
  bad.t_min = 0.5;
  EXPECT_THROW(annotate(s, bad, 2), ConfigError);
  bad = {};
  bad.t_max = 0.9;
  EXPECT_THROW(annotate(s, bad, 2), ConfigError);
  bad = {};
  bad.sigma = 0.0;
  EXPECT_THROW(annotate(s, bad, 2), ConfigError);
}

TEST(Annotate, RejectsRowsOffTheSimplex) {
  SoftLabelSet s;
  s.probs = Matrix(2, 2, 0.5);
  s.probs(1, 0) = 0.6;
  try {
    annotate(s, AnnotationConfig{}, 2);
    FAIL() << "expected a throw";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
  s.probs(1, 0) = -0.1;
  s.probs(1, 1) = 1.1;
  EXPECT_THROW(annotate(s, AnnotationConfig{}, 2), Error);
  s.probs(1, 0) = 0.5;
  s.probs(1, 1) = 0.5;
  EXPECT_THROW(annotate(s, AnnotationConfig{}, 3), Error);
}

TEST(OneHot, DegenerateAnnotation) {
  const std::vector<int> y{2, 0, 1};
  const auto s = one_hot_labels(y, 3);
  EXPECT_EQ(s.probs(0, 2), 1.0);
  EXPECT_EQ(s.probs(1, 0), 1.0);
  EXPECT_TRUE(s.annotated());
  EXPECT_EQ(mean_entropy(s), 0.0);
}

TEST(SelectRows, CarriesAnnotations) {
  SoftLabelSet s;
  s.probs = Matrix(3, 2, 0.5);
  s = annotate(s, AnnotationConfig{}, 2);
  s.weight[2] = 0.25;
  s.source_fold = {0, 1, 2};
  const std::vector<std::size_t> idx{2, 0};
  const auto t = select_rows(s, idx);
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.weight[0], 0.25);
  EXPECT_EQ(t.source_fold, (std::vector<int>{2, 0}));
}
