// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "oofkd/data.hpp"
#include "oofkd/soft_labels.hpp"

namespace oofkd {

inline constexpr int kCacheVersion = 1;
inline constexpr double kCacheSumTolerance = 1e-6;

struct CacheMeta {
  std::string dataset;
  std::string teacher;
  std::size_t n = 0;
  int c = 0;
  int k = 0;
  std::string fold_plan_hash;
  int version = kCacheVersion;
};

/// Out-of-fold teacher predictions for one (teacher, dataset) pair, indexed
/// by row. `folds[i]` is the held-out fold row i was scored in.
struct PredictionCache {
  CacheMeta meta;
  Matrix probs;
  std::vector<int> folds;
};

/// Canonical text layout:
///
///   # format=oofkd-cache
///   # version=1
///   # dataset=<name>
///   # teacher=<name>
///   # n=<rows>
///   # c=<classes>
///   # k=<folds>
///   # fold_plan_hash=<16 hex digits>
///   row,fold,p0,...,p{C-1}
///   <row>,<fold>,<9 significant digits>...
///
/// Records are written in row order; identical inputs give identical bytes.
inline void write_cache(std::ostream& out, const Matrix& probs, const FoldPlan& plan, const std::string& dataset,
                        const std::string& teacher) {
  if (probs.rows() != plan.size()) throw Error("write_cache: label count does not match fold plan");
  out << "# format=oofkd-cache\n# version=" << kCacheVersion << "\n# dataset=" << dataset
      << "\n# teacher=" << teacher << "\n# n=" << probs.rows() << "\n# c=" << probs.cols()
      << "\n# k=" << plan.k << "\n# fold_plan_hash=" << plan.hash_hex() << "\nrow,fold";
  for (std::size_t c = 0; c < probs.cols(); ++c) out << ",p" << c;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    out << i << ',' << plan.assignment[i];
    for (double p : probs.row(i)) {
      std::snprintf(buf, sizeof buf, "%.9g", p);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw Error("write_cache: I/O failure");
}

inline void write_cache(std::ostream& out, const SoftLabelSet& labels, const FoldPlan& plan,
                        const std::string& dataset, const std::string& teacher) {
  write_cache(out, labels.probs, plan, dataset, teacher);
}

inline void write_cache_file(const std::string& path, const SoftLabelSet& labels, const FoldPlan& plan,
                             const std::string& dataset, const std::string& teacher) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot create cache file '" + path + "'");
  write_cache(out, labels, plan, dataset, teacher);
}

/// Parses and validates a cache. With `plan`, also checks the fold-plan hash,
/// the fold count and every row's fold against it.
inline PredictionCache read_cache(std::istream& in, const FoldPlan* plan = nullptr) {
  std::string columns;
  auto meta = detail::read_comment_header(in, columns);
  if (meta["format"] != "oofkd-cache") throw Error("not a prediction cache (missing '# format=oofkd-cache')");
  if (meta["version"] != std::to_string(kCacheVersion)) {
    throw Error("unsupported cache version '" + meta["version"] + "'");
  }
  PredictionCache cache;
  try {
    cache.meta.dataset = meta["dataset"];
    cache.meta.teacher = meta["teacher"];
    cache.meta.n = std::stoull(meta.at("n"));
    cache.meta.c = std::stoi(meta.at("c"));
    cache.meta.k = std::stoi(meta.at("k"));
    cache.meta.fold_plan_hash = meta.at("fold_plan_hash");
  } catch (const std::exception&) {
    throw Error("cache header is missing n, c, k or fold_plan_hash");
  }
  const auto& m = cache.meta;
  if (m.c < 2 || m.k < 2) throw Error("cache header: invalid class or fold count");
  const auto cols = detail::split_csv_line(columns);
  if (cols.size() != static_cast<std::size_t>(m.c) + 2 || cols[0] != "row" || cols[1] != "fold") {
    throw Error("cache column header does not match c=" + std::to_string(m.c));
  }
  if (plan) {
    if (plan->hash_hex() != m.fold_plan_hash) {
      throw Error("cache fold_plan_hash " + m.fold_plan_hash + " does not match fold plan " + plan->hash_hex());
    }
    if (plan->k != m.k || plan->size() != m.n) throw Error("cache shape does not match fold plan");
  }

  cache.probs = Matrix(m.n, static_cast<std::size_t>(m.c));
  cache.folds.assign(m.n, -1);
  std::vector<bool> seen(m.n, false);
  std::string line;
  std::size_t records = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto rec = detail::split_csv_line(line);
    if (rec.size() != static_cast<std::size_t>(m.c) + 2) {
      throw Error("cache record has " + std::to_string(rec.size()) + " fields, expected " +
                  std::to_string(m.c + 2));
    }
    const auto row_v = detail::parse_number(rec[0]);
    const auto fold_v = detail::parse_number(rec[1]);
    if (!row_v || *row_v < 0 || *row_v != std::floor(*row_v) || *row_v >= static_cast<double>(m.n)) {
      throw Error("cache record with invalid row index '" + rec[0] + "'");
    }
    const auto row = static_cast<std::size_t>(*row_v);
    if (seen[row]) throw Error("cache has duplicate row " + std::to_string(row));
    if (!fold_v || *fold_v < 0 || *fold_v >= m.k || *fold_v != std::floor(*fold_v)) {
      throw Error("cache row " + std::to_string(row) + " has invalid fold '" + rec[1] + "'");
    }
    const int fold = static_cast<int>(*fold_v);
    if (plan && plan->assignment[row] != fold) {
      throw Error("cache row " + std::to_string(row) + " is in fold " + std::to_string(fold) +
                  " but the fold plan says " + std::to_string(plan->assignment[row]));
    }
    double sum = 0.0;
    for (int c = 0; c < m.c; ++c) {
      const auto p = detail::parse_number(rec[static_cast<std::size_t>(c) + 2]);
      if (!p || *p < 0.0) throw Error("cache row " + std::to_string(row) + " has an invalid probability");
      cache.probs(row, static_cast<std::size_t>(c)) = *p;
      sum += *p;
    }
    if (std::abs(sum - 1.0) > kCacheSumTolerance) {
      throw Error("cache row " + std::to_string(row) + " probabilities sum to " + std::to_string(sum));
    }
    cache.folds[row] = fold;
    seen[row] = true;
    ++records;
  }
  if (records != m.n) {
    for (std::size_t i = 0; i < m.n; ++i) {
      if (!seen[i]) throw Error("cache is missing row " + std::to_string(i) + " (" + std::to_string(records) +
                                " of " + std::to_string(m.n) + " rows present)");
    }
  }
  return cache;
}

inline PredictionCache read_cache_file(const std::string& path, const FoldPlan* plan = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open cache file '" + path + "'");
  return read_cache(in, plan);
}

}  // namespace oofkd
