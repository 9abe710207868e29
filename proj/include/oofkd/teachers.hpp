// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "oofkd/cache.hpp"
#include "oofkd/data.hpp"
#include "oofkd/loss.hpp"
#include "oofkd/matrix.hpp"

namespace oofkd {

enum class TeacherKind { Knn, Logistic, Cache };

/// How knn vote frequencies are pulled toward uniform.
///   Mixture: (1 - s) * freq + s / C
///   Laplace: (count + s) / (k + C * s)
enum class Smoothing { Mixture, Laplace };

struct TeacherSpec {
  TeacherKind kind = TeacherKind::Knn;
  std::string name = "knn";
  // knn
  int k = 5;
  double smoothing = 1e-3;
  Smoothing smoothing_mode = Smoothing::Mixture;
  // multinomial logistic
  double l2 = 1e-4;
  int max_iter = 500;
  double step = 0.0;  // 0: 1 / (curvature bound)
  double tol = 1e-5;
  // cache
  std::string cache_path;

  static TeacherSpec knn(int k, double smoothing = 1e-3, std::string name = "knn") {
    TeacherSpec s;
    s.kind = TeacherKind::Knn;
    s.k = k;
    s.smoothing = smoothing;
    s.name = std::move(name);
    return s;
  }
  static TeacherSpec logistic(std::string name = "logreg") {
    TeacherSpec s;
    s.kind = TeacherKind::Logistic;
    s.name = std::move(name);
    return s;
  }
  static TeacherSpec cache(std::string path, std::string name) {
    TeacherSpec s;
    s.kind = TeacherKind::Cache;
    s.cache_path = std::move(path);
    s.name = std::move(name);
    return s;
  }
};

inline const char* to_string(TeacherKind k) {
  switch (k) {
    case TeacherKind::Knn: return "knn";
    case TeacherKind::Logistic: return "logistic";
    case TeacherKind::Cache: return "cache";
  }
  return "?";
}

/// A teacher conditioned on a context. Immutable after fit_teacher().
struct FittedTeacher {
  TeacherSpec spec;
  int n_classes = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> context_ids;  // sorted

  // knn
  Matrix context_x;
  std::vector<int> context_y;
  std::vector<std::size_t> context_order_ids;  // row id per context_x row

  // logistic
  Standardizer standardizer;
  Matrix weights;  // (dim + 1) x C, last row is the bias
  bool converged = true;
  int iterations = 0;

  // cache
  std::shared_ptr<const PredictionCache> cache;
};

namespace detail {

inline void logistic_scores(const FittedTeacher& t, std::span<const double> xs, std::span<double> out) {
  const std::size_t d = t.dim;
  const auto C = static_cast<std::size_t>(t.n_classes);
  for (std::size_t c = 0; c < C; ++c) out[c] = t.weights(d, c);
  for (std::size_t j = 0; j < d; ++j) {
    const double v = (xs[j] - t.standardizer.mean[j]) / t.standardizer.scale[j];
    if (v == 0.0) continue;
    for (std::size_t c = 0; c < C; ++c) out[c] += v * t.weights(j, c);
  }
}

inline void fit_logistic(FittedTeacher& t, const Dataset& ctx) {
  const std::size_t n = ctx.size(), d = ctx.dim();
  const auto C = static_cast<std::size_t>(ctx.n_classes);
  t.standardizer = Standardizer::fit(ctx.features);
  const Matrix x = t.standardizer.apply(ctx.features);
  t.weights = Matrix(d + 1, C, 0.0);
  // Softmax cross-entropy curvature is bounded by 1/2 * lambda_max(X'X/n)
  // <= 1/2 * (trace + 1) for standardized columns plus the bias column.
  const double step = t.spec.step > 0.0 ? t.spec.step : 2.0 / (static_cast<double>(d) + 1.0) / (1.0 + t.spec.l2);
  Matrix grad(d + 1, C);
  std::vector<double> z(C);
  t.converged = false;
  t.iterations = 0;
  for (int it = 0; it < t.spec.max_iter; ++it) {
    std::fill(grad.values().begin(), grad.values().end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto xi = x.row(i);
      for (std::size_t c = 0; c < C; ++c) z[c] = t.weights(d, c);
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t c = 0; c < C; ++c) z[c] += xi[j] * t.weights(j, c);
      softmax_inplace(z);
      z[static_cast<std::size_t>(ctx.labels[i])] -= 1.0;
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t c = 0; c < C; ++c) grad(j, c) += xi[j] * z[c];
      for (std::size_t c = 0; c < C; ++c) grad(d, c) += z[c];
    }
    double gmax = 0.0;
    for (std::size_t j = 0; j <= d; ++j) {
      for (std::size_t c = 0; c < C; ++c) {
        double g = grad(j, c) / static_cast<double>(n);
        if (j < d) g += t.spec.l2 * t.weights(j, c);
        grad(j, c) = g;
        gmax = std::max(gmax, std::abs(g));
      }
    }
    t.iterations = it + 1;
    if (gmax < t.spec.tol) {
      t.converged = true;
      break;
    }
    for (std::size_t v = 0; v < grad.values().size(); ++v) t.weights.values()[v] -= step * grad.values()[v];
  }
}

}  // namespace detail

/// Conditions a teacher on `context`. For knn this stores the rows; for the
/// logistic teacher it runs full-batch gradient descent (a run that hits the
/// iteration cap keeps its last iterate with converged == false); for a cache
/// teacher it loads and validates the cache file.
inline FittedTeacher fit_teacher(const TeacherSpec& spec, const Dataset& context, std::uint64_t seed = 0) {
  (void)seed;  // both built-in teachers are deterministic
  FittedTeacher t;
  t.spec = spec;
  t.n_classes = context.n_classes;
  t.dim = context.dim();
  t.context_ids = context.row_ids;
  std::sort(t.context_ids.begin(), t.context_ids.end());

  if (spec.kind == TeacherKind::Cache) {
    t.cache = std::make_shared<const PredictionCache>(read_cache_file(spec.cache_path));
    if (context.n_classes != 0 && t.cache->meta.c != context.n_classes) {
      throw Error("cache '" + spec.cache_path + "' has c=" + std::to_string(t.cache->meta.c) + " but the dataset has " +
                  std::to_string(context.n_classes) + " classes");
    }
    t.n_classes = t.cache->meta.c;
    return t;
  }

  if (context.size() == 0) throw Error("teacher '" + spec.name + "': empty context");
  std::vector<bool> present(static_cast<std::size_t>(context.n_classes), false);
  for (int y : context.labels) present[static_cast<std::size_t>(y)] = true;
  if (std::find(present.begin(), present.end(), false) != present.end()) {
    throw Error("teacher '" + spec.name + "': context is missing a class");
  }

  if (spec.kind == TeacherKind::Knn) {
    if (spec.k < 1) throw Error("knn teacher needs k >= 1");
    if (spec.smoothing < 0.0) throw Error("knn smoothing must be non-negative");
    if (spec.smoothing_mode == Smoothing::Mixture && spec.smoothing > 1.0) throw Error("mixture smoothing must be <= 1");
    t.context_x = context.features;
    t.context_y = context.labels;
    t.context_order_ids = context.row_ids;
  } else {
    detail::fit_logistic(t, context);
  }
  return t;
}

namespace detail {

inline void knn_row(const FittedTeacher& t, std::span<const double> q, std::span<double> out,
                    std::vector<std::pair<double, std::size_t>>& scratch) {
  const std::size_t m = t.context_x.rows();
  scratch.resize(m);
  for (std::size_t r = 0; r < m; ++r) {
    auto xr = t.context_x.row(r);
    double dist = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      const double diff = xr[j] - q[j];
      dist += diff * diff;
    }
    scratch[r] = {dist, r};
  }
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(t.spec.k), m);
  auto cmp = [&t](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return t.context_order_ids[a.second] < t.context_order_ids[b.second];
  };
  std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k), scratch.end(), cmp);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t r = 0; r < k; ++r) out[static_cast<std::size_t>(t.context_y[scratch[r].second])] += 1.0;
  const double C = static_cast<double>(t.n_classes);
  const double s = t.spec.smoothing;
  const double kk = static_cast<double>(k);
  for (double& v : out) {
    v = t.spec.smoothing_mode == Smoothing::Laplace ? (v + s) / (kk + C * s) : (1.0 - s) * (v / kk) + s / C;
  }
}

}  // namespace detail

/// Scores query rows. `fold` is the held-out fold being labeled; cache
/// teachers check it against the stored fold (pass -1 to skip the check).
inline Matrix predict_proba(const FittedTeacher& t, const Dataset& queries, int fold = -1) {
  const auto C = static_cast<std::size_t>(t.n_classes);
  Matrix out(queries.size(), C);
  if (t.spec.kind == TeacherKind::Cache) {
    const auto& cache = *t.cache;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const std::size_t id = queries.row_ids[i];
      if (id >= cache.meta.n) throw Error("cache '" + t.spec.name + "' has no row " + std::to_string(id));
      if (fold >= 0 && cache.folds[id] != fold) {
        throw Error("cache '" + t.spec.name + "' has no prediction for (fold " + std::to_string(fold) + ", row " +
                    std::to_string(id) + "); it was scored in fold " + std::to_string(cache.folds[id]));
      }
      auto src = cache.probs.row(id);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }
  if (queries.dim() != t.dim) {
    throw Error("teacher '" + t.spec.name + "': query dimension " + std::to_string(queries.dim()) +
                " does not match context dimension " + std::to_string(t.dim));
  }
  if (t.spec.kind == TeacherKind::Knn) {
    std::vector<std::pair<double, std::size_t>> scratch;
    for (std::size_t i = 0; i < queries.size(); ++i) detail::knn_row(t, queries.features.row(i), out.row(i), scratch);
  } else {
    for (std::size_t i = 0; i < queries.size(); ++i) {
      detail::logistic_scores(t, queries.features.row(i), out.row(i));
      detail::softmax_inplace(out.row(i));
    }
  }
  return out;
}

/// Scores rows that are members of the teacher's own context: the leaky
/// regime in which an instance-conditioned teacher recalls stored labels.
inline Matrix predict_in_context(const FittedTeacher& t, const Dataset& queries) {
  if (t.spec.kind == TeacherKind::Cache) throw Error("in-context prediction is not available for cache teachers");
  for (std::size_t id : queries.row_ids) {
    if (!std::binary_search(t.context_ids.begin(), t.context_ids.end(), id)) {
      throw Error("row " + std::to_string(id) + " is not in the teacher's context");
    }
  }
  return predict_proba(t, queries);
}

}  // namespace oofkd
