// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "oofkd/data.hpp"
#include "oofkd/loss.hpp"
#include "oofkd/matrix.hpp"
#include "oofkd/soft_labels.hpp"

namespace oofkd {

struct GbdtConfig {
  int n_rounds = 300;
  int max_depth = 6;
  double learning_rate = 0.1;
  /// Rounds without validation improvement before stopping; 0 disables
  /// early stopping (all n_rounds are kept).
  int patience = 30;
  double val_fraction = 0.10;
  int min_samples_leaf = 5;
  int histogram_bins = 64;
  std::uint64_t seed = 0;
  bool use_sample_weights = true;

  void validate() const {
    if (n_rounds < 1 || max_depth < 1 || min_samples_leaf < 1) throw ConfigError("gbdt: rounds, depth and leaf size must be positive");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw ConfigError("gbdt: learning_rate must be in (0, 1]");
    if (patience < 0) throw ConfigError("gbdt: patience must be >= 0");
    if (!(val_fraction > 0.0 && val_fraction < 0.5)) throw ConfigError("gbdt: val_fraction must be in (0, 0.5)");
    if (histogram_bins < 2 || histogram_bins > 256) throw ConfigError("gbdt: histogram_bins must be in [2, 256]");
  }
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;  // x <= threshold goes left
  int left = -1;
  int right = -1;
  double value = 0.0;  // weighted mean residual of the node's samples

  bool operator==(const TreeNode&) const = default;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const {
    int n = 0;
    while (nodes[static_cast<std::size_t>(n)].feature >= 0) {
      const auto& nd = nodes[static_cast<std::size_t>(n)];
      n = x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
    }
    return nodes[static_cast<std::size_t>(n)].value;
  }

  bool operator==(const RegressionTree&) const = default;
};

/// Fitting diagnostics; not part of the serialized model.
struct GbdtTrace {
  std::vector<double> train_mse;  // index r: after r rounds (0 = base scores)
  std::vector<double> valid_mse;
  int best_round = 0;
  int rounds_trained = 0;
  bool degenerate = false;
  std::size_t n_train = 0;
  std::size_t n_valid = 0;
};

/// Per-class boosted regression trees on logit targets with a softmax
/// readout. trees[r * n_classes + c] is round r's tree for class c.
struct TreeEnsemble {
  int n_classes = 0;
  std::size_t n_features = 0;
  double learning_rate = 0.1;
  int max_depth = 0;
  int n_rounds = 0;
  std::vector<double> base_scores;
  std::vector<RegressionTree> trees;
  GbdtTrace trace;

  bool same_model(const TreeEnsemble& o) const {
    return n_classes == o.n_classes && n_features == o.n_features && learning_rate == o.learning_rate &&
           max_depth == o.max_depth && n_rounds == o.n_rounds && base_scores == o.base_scores && trees == o.trees;
  }
};

/// Regression targets for tree students: the alpha-mixture of tempered
/// teacher labels and the one-hot label, as centered epsilon-floored logs.
inline Matrix soft_logit_targets(const SoftLabelSet& labels, const LossConfig& cfg, std::span<const int> hard) {
  if (!labels.annotated()) throw Error("soft_logit_targets: soft labels are not annotated");
  if (hard.size() != labels.size()) throw Error("soft_logit_targets: label count mismatch");
  const auto C = static_cast<std::size_t>(labels.n_classes());
  Matrix z(labels.size(), C);
  std::vector<double> m(C);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::fill(m.begin(), m.end(), 0.0);
    if (cfg.alpha > 0.0) {
      const auto pt = temper(labels.probs.row(i), labels.temperature[i], cfg.epsilon_floor);
      for (std::size_t c = 0; c < C; ++c) m[c] = cfg.alpha * pt[c];
    }
    m[static_cast<std::size_t>(hard[i])] += 1.0 - cfg.alpha;
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      m[c] = std::log(std::max(m[c], cfg.epsilon_floor));
      mean += m[c];
    }
    mean /= static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) z(i, c) = m[c] - mean;
  }
  return z;
}

namespace detail {

/// Cut points per feature: midpoints between distinct values when there are
/// few, otherwise between quantile values. bin(x) = #cuts strictly below x.
inline std::vector<double> feature_cuts(std::vector<double> vals, int max_bins) {
  std::sort(vals.begin(), vals.end());
  std::vector<double> distinct;
  for (double v : vals)
    if (distinct.empty() || v != distinct.back()) distinct.push_back(v);
  std::vector<double> cuts;
  if (distinct.size() <= static_cast<std::size_t>(max_bins)) {
    for (std::size_t i = 0; i + 1 < distinct.size(); ++i) cuts.push_back(0.5 * (distinct[i] + distinct[i + 1]));
    return cuts;
  }
  for (int q = 1; q < max_bins; ++q) {
    const double v = vals[static_cast<std::size_t>(q) * vals.size() / static_cast<std::size_t>(max_bins)];
    auto it = std::upper_bound(distinct.begin(), distinct.end(), v);
    if (it == distinct.end()) continue;
    const double cut = 0.5 * (v + *it);
    if (cuts.empty() || cut > cuts.back()) cuts.push_back(cut);
  }
  return cuts;
}

struct BinnedData {
  std::size_t n = 0, d = 0;
  std::vector<std::vector<double>> cuts;
  std::vector<std::uint8_t> bins;  // column-major: bins[j * n + i]

  int n_bins(std::size_t j) const { return static_cast<int>(cuts[j].size()) + 1; }
};

inline BinnedData bin_features(const Matrix& x, std::span<const std::size_t> fit_rows, int max_bins) {
  BinnedData b;
  b.n = x.rows();
  b.d = x.cols();
  b.cuts.resize(b.d);
  b.bins.resize(b.n * b.d);
  std::vector<double> col(fit_rows.size());
  for (std::size_t j = 0; j < b.d; ++j) {
    for (std::size_t r = 0; r < fit_rows.size(); ++r) col[r] = x(fit_rows[r], j);
    b.cuts[j] = feature_cuts(col, max_bins);
    const auto& cj = b.cuts[j];
    for (std::size_t i = 0; i < b.n; ++i) {
      b.bins[j * b.n + i] = static_cast<std::uint8_t>(std::lower_bound(cj.begin(), cj.end(), x(i, j)) - cj.begin());
    }
  }
  return b;
}

struct Bucket {
  double w = 0.0;
  double s = 0.0;
  std::size_t n = 0;
};

/// Grows one tree level by level on weighted residuals; split gain is the
/// weighted variance reduction S_L^2/W_L + S_R^2/W_R - S^2/W.
inline RegressionTree grow_tree(const BinnedData& data, std::span<const double> resid, std::span<const double> w,
                                std::vector<std::size_t> rows, const GbdtConfig& cfg) {
  RegressionTree tree;
  struct Pending {
    int node;
    int depth;
    std::vector<std::size_t> rows;
  };
  std::vector<Pending> level;
  tree.nodes.emplace_back();
  level.push_back({0, 0, std::move(rows)});
  std::vector<Bucket> hist;
  const auto min_leaf = static_cast<std::size_t>(cfg.min_samples_leaf);

  while (!level.empty()) {
    std::vector<Pending> next;
    for (auto& p : level) {
      double W = 0.0, S = 0.0;
      for (std::size_t i : p.rows) {
        W += w[i];
        S += w[i] * resid[i];
      }
      tree.nodes[static_cast<std::size_t>(p.node)].value = W > 0.0 ? S / W : 0.0;
      if (p.depth >= cfg.max_depth || p.rows.size() < 2 * min_leaf || !(W > 0.0)) continue;

      const double parent = S * S / W;
      double best_gain = 1e-12 * std::max(1.0, parent);
      int best_feature = -1, best_bin = -1;
      for (std::size_t j = 0; j < data.d; ++j) {
        const int nb = data.n_bins(j);
        if (nb < 2) continue;
        hist.assign(static_cast<std::size_t>(nb), Bucket{});
        const std::uint8_t* col = data.bins.data() + j * data.n;
        for (std::size_t i : p.rows) {
          auto& h = hist[col[i]];
          h.w += w[i];
          h.s += w[i] * resid[i];
          ++h.n;
        }
        Bucket left;
        for (int b = 0; b + 1 < nb; ++b) {
          left.w += hist[static_cast<std::size_t>(b)].w;
          left.s += hist[static_cast<std::size_t>(b)].s;
          left.n += hist[static_cast<std::size_t>(b)].n;
          const std::size_t rn = p.rows.size() - left.n;
          if (left.n < min_leaf) continue;
          if (rn < min_leaf) break;
          const double rw = W - left.w;
          if (!(left.w > 0.0) || !(rw > 0.0)) continue;
          const double rs = S - left.s;
          const double gain = left.s * left.s / left.w + rs * rs / rw - parent;
          if (gain > best_gain) {
            best_gain = gain;
            best_feature = static_cast<int>(j);
            best_bin = b;
          }
        }
      }
      if (best_feature < 0) continue;

      const auto fj = static_cast<std::size_t>(best_feature);
      const std::uint8_t* col = data.bins.data() + fj * data.n;
      std::vector<std::size_t> lrows, rrows;
      for (std::size_t i : p.rows) (col[i] <= best_bin ? lrows : rrows).push_back(i);
      const int l = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      auto& nd = tree.nodes[static_cast<std::size_t>(p.node)];
      nd.feature = best_feature;
      nd.threshold = data.cuts[fj][static_cast<std::size_t>(best_bin)];
      nd.left = l;
      nd.right = l + 1;
      next.push_back({l, p.depth + 1, std::move(lrows)});
      next.push_back({l + 1, p.depth + 1, std::move(rrows)});
    }
    level = std::move(next);
  }
  return tree;
}

inline double weighted_mse(const Matrix& z, const Matrix& f, std::span<const double> w, std::span<const std::size_t> rows) {
  double num = 0.0, den = 0.0;
  for (std::size_t i : rows) {
    double s = 0.0;
    for (std::size_t c = 0; c < z.cols(); ++c) {
      const double e = z(i, c) - f(i, c);
      s += e * e;
    }
    num += w[i] * s;
    den += w[i];
  }
  return den > 0.0 ? num / (den * static_cast<double>(z.cols())) : 0.0;
}

}  // namespace detail

/// Boosts one regression tree per class per round on the weighted residuals
/// of `targets`. A stratified (by `strata`, when given) validation split of
/// cfg.val_fraction drives early stopping; the ensemble is truncated back to
/// the best validation round. `validation_mask`, when non-empty, fixes the
/// validation rows explicitly.
inline TreeEnsemble fit_gbdt(const Matrix& x, const Matrix& targets, std::span<const double> sample_weights,
                             const GbdtConfig& cfg, std::span<const int> strata = {},
                             const std::vector<bool>& validation_mask = {}) {
  cfg.validate();
  const std::size_t n = x.rows();
  const std::size_t C = targets.cols();
  if (targets.rows() != n || sample_weights.size() != n) throw Error("fit_gbdt: row count mismatch");
  if (n < 20) throw Error("fit_gbdt: need at least 20 rows, got " + std::to_string(n));
  if (C < 1) throw Error("fit_gbdt: no target columns");
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(sample_weights[i] > 0.0) || !std::isfinite(sample_weights[i])) throw Error("fit_gbdt: sample weights must be positive");
    w[i] = cfg.use_sample_weights ? sample_weights[i] : 1.0;
  }
  for (double v : targets.values())
    if (!std::isfinite(v)) throw Error("fit_gbdt: non-finite target");

  std::vector<std::size_t> train_rows, valid_rows;
  if (!validation_mask.empty()) {
    if (validation_mask.size() != n) throw Error("fit_gbdt: validation mask size mismatch");
    for (std::size_t i = 0; i < n; ++i) (validation_mask[i] ? valid_rows : train_rows).push_back(i);
  } else {
    std::vector<int> groups(n, 0);
    if (!strata.empty()) {
      if (strata.size() != n) throw Error("fit_gbdt: strata size mismatch");
      groups.assign(strata.begin(), strata.end());
    }
    std::tie(train_rows, valid_rows) = stratified_holdout(groups, cfg.val_fraction, derive_seed(cfg.seed, 0xEA51));
  }
  if (train_rows.empty()) throw Error("fit_gbdt: no training rows");

  TreeEnsemble model;
  model.n_classes = static_cast<int>(C);
  model.n_features = x.cols();
  model.learning_rate = cfg.learning_rate;
  model.max_depth = cfg.max_depth;
  model.base_scores.assign(C, 0.0);
  model.trace.n_train = train_rows.size();
  model.trace.n_valid = valid_rows.size();

  double wsum = 0.0;
  for (std::size_t i : train_rows) wsum += w[i];
  bool constant = true;
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0, lo = INFINITY, hi = -INFINITY;
    for (std::size_t i : train_rows) {
      s += w[i] * targets(i, c);
      lo = std::min(lo, targets(i, c));
      hi = std::max(hi, targets(i, c));
    }
    model.base_scores[c] = s / wsum;
    if (hi - lo > 1e-12) constant = false;
  }

  Matrix f(n, C);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < C; ++c) f(i, c) = model.base_scores[c];
  model.trace.train_mse.push_back(detail::weighted_mse(targets, f, w, train_rows));
  if (!valid_rows.empty()) model.trace.valid_mse.push_back(detail::weighted_mse(targets, f, w, valid_rows));
  if (constant) {
    model.trace.degenerate = true;
    return model;
  }

  const auto data = detail::bin_features(x, train_rows, cfg.histogram_bins);
  const bool early_stop = cfg.patience > 0 && !valid_rows.empty();
  double best_valid = valid_rows.empty() ? 0.0 : model.trace.valid_mse[0];
  int best_round = 0;
  std::vector<double> resid(n);
  for (int round = 1; round <= cfg.n_rounds; ++round) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i : train_rows) resid[i] = targets(i, c) - f(i, c);
      auto tree = detail::grow_tree(data, resid, w, train_rows, cfg);
      for (std::size_t i = 0; i < n; ++i) f(i, c) += cfg.learning_rate * tree.predict(x.row(i));
      model.trees.push_back(std::move(tree));
    }
    model.trace.rounds_trained = round;
    model.trace.train_mse.push_back(detail::weighted_mse(targets, f, w, train_rows));
    if (!valid_rows.empty()) {
      const double v = detail::weighted_mse(targets, f, w, valid_rows);
      model.trace.valid_mse.push_back(v);
      if (v < best_valid) {
        best_valid = v;
        best_round = round;
      }
      if (early_stop && round - best_round >= cfg.patience) break;
    }
  }
  if (!early_stop) best_round = model.trace.rounds_trained;
  model.trace.best_round = best_round;
  model.n_rounds = best_round;
  model.trees.resize(static_cast<std::size_t>(best_round) * C);
  return model;
}

inline Matrix predict_gbdt_raw(const TreeEnsemble& model, const Matrix& x) {
  if (x.cols() != model.n_features) {
    throw Error("predict_gbdt: feature dimension " + std::to_string(x.cols()) + " does not match model dimension " +
                std::to_string(model.n_features));
  }
  const auto C = static_cast<std::size_t>(model.n_classes);
  Matrix f(x.rows(), C);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t c = 0; c < C; ++c) f(i, c) = model.base_scores[c];
  // Tree-major order keeps one tree's nodes in cache across the batch; each
  // score still sums its trees in round order.
  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    const auto& tree = model.trees[t];
    for (std::size_t i = 0; i < x.rows(); ++i) f(i, t % C) += model.learning_rate * tree.predict(x.row(i));
  }
  return f;
}

/// Softmax of the per-class raw scores.
inline Matrix predict_gbdt(const TreeEnsemble& model, const Matrix& x) {
  Matrix f = predict_gbdt_raw(model, x);
  for (std::size_t i = 0; i < f.rows(); ++i) detail::softmax_inplace(f.row(i));
  return f;
}

// Text serialization; doubles are written as hex floats so a round trip is
// bit-exact.
inline constexpr const char* kGbdtMagic = "oofkd-gbdt";
inline constexpr int kGbdtVersion = 1;

namespace detail {
inline std::string hexf(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}
inline double read_hexf(std::istream& in) {
  std::string tok;
  if (!(in >> tok)) throw Error("model file truncated");
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') throw Error("model file: bad number '" + tok + "'");
  return v;
}
inline void expect(std::istream& in, const std::string& word) {
  std::string tok;
  if (!(in >> tok) || tok != word) throw Error("model file: expected '" + word + "', got '" + tok + "'");
}
}  // namespace detail

inline void save_gbdt(std::ostream& out, const TreeEnsemble& m) {
  out << kGbdtMagic << ' ' << kGbdtVersion << "\nn_classes " << m.n_classes << "\nn_features " << m.n_features
      << "\nlearning_rate " << detail::hexf(m.learning_rate) << "\nmax_depth " << m.max_depth << "\nn_rounds "
      << m.n_rounds << "\nbase_scores";
  for (double b : m.base_scores) out << ' ' << detail::hexf(b);
  out << "\ntrees " << m.trees.size() << '\n';
  for (const auto& t : m.trees) {
    out << "tree " << t.nodes.size() << '\n';
    for (const auto& nd : t.nodes) {
      out << nd.feature << ' ' << detail::hexf(nd.threshold) << ' ' << nd.left << ' ' << nd.right << ' '
          << detail::hexf(nd.value) << '\n';
    }
  }
  out << "end\n";
}

inline TreeEnsemble load_gbdt(std::istream& in) {
  detail::expect(in, kGbdtMagic);
  int version = 0;
  in >> version;
  if (version != kGbdtVersion) throw Error("unsupported gbdt model version " + std::to_string(version));
  TreeEnsemble m;
  std::size_t n_trees = 0;
  detail::expect(in, "n_classes");
  in >> m.n_classes;
  detail::expect(in, "n_features");
  in >> m.n_features;
  detail::expect(in, "learning_rate");
  m.learning_rate = detail::read_hexf(in);
  detail::expect(in, "max_depth");
  in >> m.max_depth;
  detail::expect(in, "n_rounds");
  in >> m.n_rounds;
  detail::expect(in, "base_scores");
  if (!in || m.n_classes < 1) throw Error("gbdt model header is malformed");
  for (int c = 0; c < m.n_classes; ++c) m.base_scores.push_back(detail::read_hexf(in));
  detail::expect(in, "trees");
  in >> n_trees;
  for (std::size_t t = 0; t < n_trees; ++t) {
    detail::expect(in, "tree");
    std::size_t nn = 0;
    in >> nn;
    RegressionTree tree;
    tree.nodes.resize(nn);
    for (auto& nd : tree.nodes) {
      in >> nd.feature;
      nd.threshold = detail::read_hexf(in);
      in >> nd.left >> nd.right;
      nd.value = detail::read_hexf(in);
      if (!in) throw Error("gbdt model: truncated tree");
      const auto limit = static_cast<int>(nn);
      if (nd.feature >= static_cast<int>(m.n_features) ||
          (nd.feature >= 0 && (nd.left <= 0 || nd.right <= 0 || nd.left >= limit || nd.right >= limit))) {
        throw Error("gbdt model: invalid node");
      }
    }
    m.trees.push_back(std::move(tree));
  }
  detail::expect(in, "end");
  return m;
}

}  // namespace oofkd
