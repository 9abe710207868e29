// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "oofkd/error.hpp"
#include "oofkd/matrix.hpp"
#include "oofkd/random.hpp"

namespace oofkd {

inline constexpr int kDefaultFolds = 5;

/// A preprocessed classification dataset. Labels are dense class indices in
/// [0, n_classes); `row_ids` maps each row back to the row of the dataset it
/// was loaded as (identity on load, preserved by subset()).
struct Dataset {
  std::string name;
  Matrix features;
  std::vector<int> labels;
  int n_classes = 0;
  std::vector<std::string> feature_names;
  std::vector<bool> categorical;
  std::vector<std::string> class_names;
  std::vector<std::size_t> row_ids;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
};

struct LoadOptions {
  std::string label_column;
  /// Minimum members per class; loading fails below it so the dataset can be
  /// stratified into this many folds.
  int min_class_count = kDefaultFolds;
  std::vector<std::string> missing_tokens = {"", "NA", "N/A", "NaN", "nan", "?", "null", "NULL"};
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
  return std::string(s.substr(b, e - b));
}

/// Splits one comma-separated record. Double quotes group fields and `""`
/// escapes a quote inside a quoted field.
inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (quoted) throw Error("unterminated quoted field");
  out.push_back(trim(cur));
  return out;
}

inline std::optional<double> parse_number(std::string_view s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

/// Checks that a dataset can be split into `folds` stratified folds.
inline void validate_dataset(const Dataset& ds, int folds) {
  if (ds.n_classes < 2) throw Error("dataset '" + ds.name + "' has a single class");
  std::vector<std::size_t> counts(static_cast<std::size_t>(ds.n_classes), 0);
  for (int y : ds.labels) {
    if (y < 0 || y >= ds.n_classes) throw Error("label out of range in dataset '" + ds.name + "'");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] < static_cast<std::size_t>(folds)) {
      throw Error("class " + std::to_string(c) + " ('" +
                  (c < ds.class_names.size() ? ds.class_names[c] : std::string()) + "') has " +
                  std::to_string(counts[c]) + " members, fewer than the " + std::to_string(folds) +
                  " required for stratified folds");
    }
  }
  for (double v : ds.features.values()) {
    if (!std::isfinite(v)) throw Error("non-finite feature value in dataset '" + ds.name + "'");
  }
}

/// Parses delimited text with a mandatory header row. Labels are re-indexed
/// densely by first appearance, missing numeric cells become 0, and any
/// column with a non-numeric value is integer-encoded by first appearance.
/// An empty label_column selects the last column.
inline Dataset parse_dataset(std::istream& in, std::string name, const LoadOptions& opt) {
  std::string line;
  if (!std::getline(in, line)) throw Error("dataset '" + name + "' is empty");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2) throw Error("dataset '" + name + "' needs a label column and at least one feature");
  const auto label_it = opt.label_column.empty() ? header.end() - 1
                                                  : std::find(header.begin(), header.end(), opt.label_column);
  if (label_it == header.end()) {
    throw Error("label column '" + opt.label_column + "' not found in '" + name + "'");
  }
  const std::size_t label_col = static_cast<std::size_t>(label_it - header.begin());

  std::vector<std::vector<std::string>> cells;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto rec = detail::split_csv_line(line);
    if (rec.size() != header.size()) {
      throw Error("'" + name + "' line " + std::to_string(lineno) + ": expected " +
                  std::to_string(header.size()) + " fields, got " + std::to_string(rec.size()));
    }
    cells.push_back(std::move(rec));
  }
  if (cells.empty()) throw Error("dataset '" + name + "' has no data rows");

  auto is_missing = [&](const std::string& s) {
    return std::find(opt.missing_tokens.begin(), opt.missing_tokens.end(), s) != opt.missing_tokens.end();
  };

  Dataset ds;
  ds.name = std::move(name);
  const std::size_t n = cells.size();
  const std::size_t d = header.size() - 1;
  ds.features = Matrix(n, d);
  ds.labels.resize(n);
  ds.row_ids.resize(n);
  std::iota(ds.row_ids.begin(), ds.row_ids.end(), std::size_t{0});

  std::unordered_map<std::string, int> label_index;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& raw = cells[i][label_col];
    if (is_missing(raw)) throw Error("missing label on data row " + std::to_string(i));
    auto [it, inserted] = label_index.try_emplace(raw, static_cast<int>(ds.class_names.size()));
    if (inserted) ds.class_names.push_back(raw);
    ds.labels[i] = it->second;
  }
  ds.n_classes = static_cast<int>(ds.class_names.size());

  std::size_t j = 0;
  for (std::size_t col = 0; col < header.size(); ++col) {
    if (col == label_col) continue;
    ds.feature_names.push_back(header[col]);
    bool numeric = true;
    for (std::size_t i = 0; i < n && numeric; ++i) {
      const auto& s = cells[i][col];
      if (!is_missing(s) && !detail::parse_number(s)) numeric = false;
    }
    ds.categorical.push_back(!numeric);
    if (numeric) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = cells[i][col];
        ds.features(i, j) = is_missing(s) ? 0.0 : *detail::parse_number(s);
      }
    } else {
      std::unordered_map<std::string, int> levels;
      for (std::size_t i = 0; i < n; ++i) {
        auto [it, ins] = levels.try_emplace(cells[i][col], static_cast<int>(levels.size()));
        ds.features(i, j) = static_cast<double>(it->second);
      }
    }
    ++j;
  }
  if (ds.n_classes < 2) throw Error("dataset '" + ds.name + "' has a single class");
  validate_dataset(ds, opt.min_class_count);
  return ds;
}

inline Dataset load_dataset(const std::string& path, const LoadOptions& opt) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset file '" + path + "'");
  std::string name = path;
  if (auto pos = name.find_last_of('/'); pos != std::string::npos) name = name.substr(pos + 1);
  if (auto pos = name.rfind('.'); pos != std::string::npos) name = name.substr(0, pos);
  return parse_dataset(in, name, opt);
}

/// Rows `idx` of `ds`, keeping class coding and original row ids.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
  Dataset out;
  out.name = ds.name;
  out.features = ds.features.select_rows(idx);
  out.n_classes = ds.n_classes;
  out.feature_names = ds.feature_names;
  out.categorical = ds.categorical;
  out.class_names = ds.class_names;
  out.labels.reserve(idx.size());
  out.row_ids.reserve(idx.size());
  for (std::size_t i : idx) {
    out.labels.push_back(ds.labels[i]);
    out.row_ids.push_back(ds.row_ids[i]);
  }
  return out;
}

/// Stratified assignment of rows to folds.
struct FoldPlan {
  int k = kDefaultFolds;
  std::uint64_t seed = 0;
  std::vector<int> assignment;

  std::size_t size() const { return assignment.size(); }

  std::vector<std::size_t> fold_rows(int fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == fold) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> complement_rows(int fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] != fold) out.push_back(i);
    return out;
  }

  /// FNV-1a over K and the assignment; identifies the partition (two seeds
  /// producing the same partition hash equal).
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xFF;
        h *= 0x100000001b3ULL;
      }
    };
    mix(static_cast<std::uint64_t>(k));
    mix(assignment.size());
    for (int a : assignment) mix(static_cast<std::uint64_t>(a));
    return h;
  }

  std::string hash_hex() const { return detail::hex64(hash()); }

  bool operator==(const FoldPlan&) const = default;
};

/// Shuffles each class with a seeded generator and deals its members
/// round-robin over the folds. The dealing offset carries over between
/// classes so total fold sizes stay balanced too.
inline FoldPlan make_folds(std::span<const int> labels, int k, std::uint64_t seed) {
  if (k < 2) throw Error("fold count must be at least 2, got " + std::to_string(k));
  int n_classes = 0;
  for (int y : labels) {
    if (y < 0) throw Error("negative class index in labels");
    n_classes = std::max(n_classes, y + 1);
  }
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.assignment.assign(labels.size(), -1);
  Rng rng(derive_seed(seed, 0xF01D));
  std::size_t offset = 0;
  for (std::size_t c = 0; c < members.size(); ++c) {
    auto& m = members[c];
    if (m.empty()) continue;
    if (m.size() < static_cast<std::size_t>(k)) {
      throw Error("class " + std::to_string(c) + " has " + std::to_string(m.size()) +
                  " members, fewer than K=" + std::to_string(k));
    }
    rng.shuffle(std::span<std::size_t>(m));
    for (std::size_t r = 0; r < m.size(); ++r) {
      plan.assignment[m[r]] = static_cast<int>((offset + r) % static_cast<std::size_t>(k));
    }
    offset = (offset + m.size()) % static_cast<std::size_t>(k);
  }
  return plan;
}

/// Seeded stratified holdout: returns (train rows, test rows).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(
    std::span<const int> labels, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw Error("holdout fraction must be in (0, 1)");
  int n_classes = 0;
  for (int y : labels) n_classes = std::max(n_classes, y + 1);
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);
  Rng rng(seed);
  std::vector<bool> held(labels.size(), false);
  for (auto& m : members) {
    if (m.empty()) continue;
    rng.shuffle(std::span<std::size_t>(m));
    auto take = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(m.size())));
    take = std::clamp<std::size_t>(take, m.size() > 1 ? 1 : 0, m.size() > 1 ? m.size() - 1 : 0);
    for (std::size_t r = 0; r < take; ++r) held[m[r]] = true;
  }
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < labels.size(); ++i) (held[i] ? test : train).push_back(i);
  return {std::move(train), std::move(test)};
}

// Fold-plan file: `# key=value` header lines then `row,fold` records.
inline void write_fold_plan(std::ostream& out, const FoldPlan& plan, const std::string& dataset_name) {
  out << "# format=oofkd-folds\n# version=1\n# dataset=" << dataset_name << "\n# n=" << plan.size()
      << "\n# k=" << plan.k << "\n# seed=" << plan.seed << "\n# fold_plan_hash=" << plan.hash_hex()
      << "\nrow,fold\n";
  for (std::size_t i = 0; i < plan.size(); ++i) out << i << ',' << plan.assignment[i] << '\n';
}

namespace detail {
inline std::map<std::string, std::string> read_comment_header(std::istream& in, std::string& first_line) {
  std::map<std::string, std::string> meta;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("#", 0) == 0) {
      auto body = trim(std::string_view(line).substr(1));
      auto eq = body.find('=');
      if (eq != std::string::npos) meta[trim(std::string_view(body).substr(0, eq))] = trim(std::string_view(body).substr(eq + 1));
      continue;
    }
    first_line = line;
    return meta;
  }
  first_line.clear();
  return meta;
}
}  // namespace detail

inline FoldPlan read_fold_plan(std::istream& in) {
  std::string header;
  auto meta = detail::read_comment_header(in, header);
  if (meta["format"] != "oofkd-folds") throw Error("not a fold-plan file");
  if (meta["version"] != "1") throw Error("unsupported fold-plan version '" + meta["version"] + "'");
  if (detail::trim(header) != "row,fold") throw Error("fold-plan file: bad column header");
  FoldPlan plan;
  plan.k = std::stoi(meta.at("k"));
  plan.seed = std::stoull(meta.at("seed"));
  const std::size_t n = std::stoull(meta.at("n"));
  plan.assignment.assign(n, -1);
  std::string line;
  std::size_t seen = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    auto rec = detail::split_csv_line(line);
    if (rec.size() != 2) throw Error("fold-plan file: malformed record '" + line + "'");
    const auto row = std::stoull(rec[0]);
    const int fold = std::stoi(rec[1]);
    if (row >= n || fold < 0 || fold >= plan.k || plan.assignment[row] != -1) {
      throw Error("fold-plan file: invalid record '" + line + "'");
    }
    plan.assignment[row] = fold;
    ++seen;
  }
  if (seen != n) throw Error("fold-plan file: expected " + std::to_string(n) + " rows, got " + std::to_string(seen));
  if (meta.count("fold_plan_hash") && meta["fold_plan_hash"] != plan.hash_hex()) {
    throw Error("fold-plan file: hash mismatch");
  }
  return plan;
}

/// Preprocessed matrix export: header of feature names plus `label`, values
/// printed with 17 significant digits so they parse back exactly.
inline void write_matrix(std::ostream& out, const Dataset& ds) {
  for (const auto& f : ds.feature_names) out << f << ',';
  out << "label\n";
  char buf[40];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < ds.dim(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.features(i, j));
      out << buf << ',';
    }
    out << ds.labels[i] << '\n';
  }
}

/// Per-feature standardization statistics (used by the MLP path only).
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Matrix& x) {
    Standardizer s;
    s.mean.assign(x.cols(), 0.0);
    s.scale.assign(x.cols(), 1.0);
    if (x.rows() == 0) return s;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) m += x(i, j);
      m /= static_cast<double>(x.rows());
      double v = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) v += (x(i, j) - m) * (x(i, j) - m);
      v /= static_cast<double>(x.rows());
      s.mean[j] = m;
      s.scale[j] = v > 1e-24 ? std::sqrt(v) : 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& x) const {
    if (x.cols() != mean.size()) throw Error("Standardizer: dimension mismatch");
    Matrix out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = (x(i, j) - mean[j]) / scale[j];
    return out;
  }
};

}  // namespace oofkd
