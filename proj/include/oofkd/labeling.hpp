// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "oofkd/data.hpp"
#include "oofkd/loss.hpp"
#include "oofkd/parallel.hpp"
#include "oofkd/soft_labels.hpp"
#include "oofkd/teachers.hpp"

namespace oofkd {

struct AnnotationConfig {
  double t_min = 1.0;
  double t_max = 5.0;
  double mu = 0.7;
  double sigma = 0.2;
  /// When false every row gets `fixed_temperature` instead of the entropy map.
  bool adaptive_temperature = true;
  double fixed_temperature = 3.0;
  /// When false every weight is 1.
  bool confidence_weighting = true;

  void validate() const {
    if (!(t_min >= 1.0)) throw ConfigError("t_min must be >= 1");
    if (!(t_max >= t_min)) throw ConfigError("t_max must be >= t_min");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be > 0");
    if (!(fixed_temperature >= 1.0)) throw ConfigError("fixed_temperature must be >= 1");
  }
};

/// One teacher fit made while labeling: which rows it conditioned on and
/// which fold it labeled. Collected on request for leakage audits.
struct TeacherFitRecord {
  std::string teacher;
  int fold = -1;
  std::vector<std::size_t> context_ids;
  std::vector<std::size_t> labeled_ids;
  bool converged = true;
};

/// Out-of-fold labeling: for every fold k each teacher is conditioned on the
/// other folds and scores fold k only; with several teachers the per-row
/// vectors are averaged with equal weight. Folds run on up to `workers`
/// threads and land in disjoint rows, so the result does not depend on it.
inline SoftLabelSet collect_oof(const Dataset& ds, const FoldPlan& plan, std::span<const TeacherSpec> specs,
                                std::uint64_t seed, std::vector<TeacherFitRecord>* audit = nullptr,
                                std::size_t workers = 1) {
  if (specs.empty()) throw Error("collect_oof: no teachers");
  if (plan.size() != ds.size()) throw Error("collect_oof: fold plan does not cover the dataset");
  const auto C = static_cast<std::size_t>(ds.n_classes);
  const auto K = static_cast<std::size_t>(plan.k);

  std::vector<std::vector<std::size_t>> fold_rows(K);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const int f = plan.assignment[i];
    if (f < 0 || f >= plan.k) throw Error("collect_oof: fold plan has an out-of-range fold");
    fold_rows[static_cast<std::size_t>(f)].push_back(i);
  }

  SoftLabelSet out;
  out.probs = Matrix(ds.size(), C, 0.0);
  out.source_fold = plan.assignment;
  for (const auto& s : specs) out.provenance.teachers.push_back(s.name);
  out.provenance.fold_plan_hash = plan.hash_hex();
  out.provenance.leaky = false;

  std::vector<std::vector<TeacherFitRecord>> records(K);
  parallel_for(K, workers, [&](std::size_t k) {
    const auto& rows = fold_rows[k];
    if (rows.empty()) throw Error("collect_oof: fold " + std::to_string(k) + " is empty");
    const Dataset queries = subset(ds, rows);
    const auto ctx_rows = plan.complement_rows(static_cast<int>(k));
    const Dataset context = subset(ds, ctx_rows);
    std::vector<Matrix> per_teacher;
    for (std::size_t m = 0; m < specs.size(); ++m) {
      Matrix p;
      try {
        const auto teacher = fit_teacher(specs[m], context, derive_seed(seed, k * 131 + m));
        p = predict_proba(teacher, queries, static_cast<int>(k));
        if (audit) records[k].push_back({specs[m].name, static_cast<int>(k), teacher.context_ids, queries.row_ids,
                                         teacher.converged});
      } catch (const std::exception& e) {
        throw Error("teacher '" + specs[m].name + "', fold " + std::to_string(k) + ": " + e.what());
      }
      if (p.cols() != C) throw Error("teacher '" + specs[m].name + "' returned the wrong class count");
      per_teacher.push_back(std::move(p));
    }
    const double inv_m = 1.0 / static_cast<double>(specs.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto dst = out.probs.row(rows[r]);
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (const auto& p : per_teacher) s += p(r, c);
        dst[c] = specs.size() == 1 ? s : s * inv_m;
      }
    }
  });
  if (audit) {
    for (auto& rs : records)
      for (auto& r : rs) audit->push_back(std::move(r));
  }
  return out;
}

/// Leaky labeling: each teacher is conditioned on the whole dataset and then
/// scores those same rows. Exists to demonstrate the collapse of in-context
/// scores; cache teachers are rejected because their leakage is unknowable.
inline SoftLabelSet collect_leaky(const Dataset& ds, std::span<const TeacherSpec> specs, std::uint64_t seed) {
  if (specs.empty()) throw Error("collect_leaky: no teachers");
  const auto C = static_cast<std::size_t>(ds.n_classes);
  SoftLabelSet out;
  out.probs = Matrix(ds.size(), C, 0.0);
  out.source_fold.assign(ds.size(), -1);
  out.provenance.leaky = true;
  for (std::size_t m = 0; m < specs.size(); ++m) {
    if (specs[m].kind == TeacherKind::Cache) throw Error("collect_leaky: cache teachers cannot be scored in context");
    out.provenance.teachers.push_back(specs[m].name);
    const auto teacher = fit_teacher(specs[m], ds, derive_seed(seed, m));
    const Matrix p = predict_in_context(teacher, ds);
    for (std::size_t v = 0; v < p.values().size(); ++v) out.probs.values()[v] += p.values()[v];
  }
  if (specs.size() > 1) {
    const double inv_m = 1.0 / static_cast<double>(specs.size());
    for (double& v : out.probs.values()) v *= inv_m;
  }
  return out;
}

inline double annotation_temperature(double H, int C, const AnnotationConfig& cfg) {
  if (!cfg.adaptive_temperature) return cfg.fixed_temperature;
  const double t = cfg.t_min + (cfg.t_max - cfg.t_min) * H / std::log(static_cast<double>(C));
  return std::clamp(t, cfg.t_min, cfg.t_max);
}

inline double annotation_weight(double H, const AnnotationConfig& cfg) {
  if (!cfg.confidence_weighting) return 1.0;
  const double d = H - cfg.mu;
  return std::exp(-d * d / (2.0 * cfg.sigma * cfg.sigma));
}

/// Fills entropy (nats), temperature and confidence weight for every row,
/// once, from the assembled label matrix.
inline SoftLabelSet annotate(SoftLabelSet labels, const AnnotationConfig& cfg, int C) {
  cfg.validate();
  if (C < 2) throw Error("annotate: need at least two classes");
  if (labels.probs.cols() != static_cast<std::size_t>(C)) throw Error("annotate: class count mismatch");
  const std::size_t n = labels.size();
  labels.entropy.resize(n);
  labels.temperature.resize(n);
  labels.weight.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = labels.probs.row(i);
    double s = 0.0;
    for (double v : p) {
      if (!(v >= 0.0)) throw Error("annotate: row " + std::to_string(i) + " has a negative or NaN probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw Error("annotate: row " + std::to_string(i) + " is not on the simplex");
    const double H = entropy(p);
    labels.entropy[i] = H;
    labels.temperature[i] = annotation_temperature(H, C, cfg);
    labels.weight[i] = annotation_weight(H, cfg);
  }
  return labels;
}

/// Hard labels as a degenerate soft-label set: one-hot rows, T = 1, w = 1.
inline SoftLabelSet one_hot_labels(std::span<const int> y, int C) {
  SoftLabelSet s;
  s.probs = Matrix(y.size(), static_cast<std::size_t>(C), 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) s.probs(i, static_cast<std::size_t>(y[i])) = 1.0;
  s.entropy.assign(y.size(), 0.0);
  s.temperature.assign(y.size(), 1.0);
  s.weight.assign(y.size(), 1.0);
  s.source_fold.assign(y.size(), -1);
  return s;
}

inline double mean_entropy(const SoftLabelSet& s) {
  if (s.size() == 0) return 0.0;
  double t = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) t += entropy(s.probs.row(i));
  return t / static_cast<double>(s.size());
}

}  // namespace oofkd
