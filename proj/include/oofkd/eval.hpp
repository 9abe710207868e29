// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "oofkd/data.hpp"
#include "oofkd/error.hpp"
#include "oofkd/matrix.hpp"

namespace oofkd {

enum class StatMethod { Exact, NormalApproximation };

inline const char* to_string(StatMethod m) { return m == StatMethod::Exact ? "exact" : "normal-approximation"; }

struct StatResult {
  double statistic = 0.0;
  double p_value = 1.0;
  int n_effective = 0;
  StatMethod method = StatMethod::Exact;
};

struct MetricRow {
  std::string dataset;
  std::string model;
  double auc = 0.0;
  double ece = 0.0;
  double latency_ms = 0.0;
  std::size_t n_features = 0;
  std::optional<double> teacher_auc;
};

/// 1-based midranks of `v` in ascending order.
inline std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j + 2);
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = rank;
    i = j + 1;
  }
  return r;
}

/// Binary AUC: probability that a positive outscores a negative, ties 1/2.
inline double roc_auc_binary(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw Error("roc_auc: size mismatch");
  const auto r = midranks(scores);
  double n_pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (positive[i]) {
      n_pos += 1.0;
      rank_sum += r[i];
    }
  }
  const double n_neg = static_cast<double>(r.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw Error("roc_auc: need at least one positive and one negative");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Two columns: AUC of column 1. More: unweighted mean of one-vs-rest AUCs
/// over classes that occur in `labels`.
inline double roc_auc(const Matrix& scores, std::span<const int> labels) {
  if (scores.rows() != labels.size()) throw Error("roc_auc: size mismatch");
  if (scores.rows() == 0) throw Error("roc_auc: empty input");
  const std::size_t C = scores.cols();
  std::vector<int> counts(C, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw Error("roc_auc: label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  if (std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) < 2) {
    throw Error("roc_auc: labels contain a single class");
  }
  std::vector<double> col(scores.rows());
  std::vector<int> pos(scores.rows());
  auto one = [&](std::size_t c) {
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      col[i] = scores(i, c);
      pos[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
    }
    return roc_auc_binary(col, pos);
  };
  if (C == 2) return one(1);
  double s = 0.0;
  int m = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (counts[c] == 0) continue;
    s += one(c);
    ++m;
  }
  return s / m;
}

inline double retention(double student_auc, double teacher_auc) {
  if (!(teacher_auc > 0.0)) throw Error("retention: teacher AUC must be positive");
  return 100.0 * student_auc / teacher_auc;
}

struct WinRate {
  double rate = 0.0;
  double mean_win = 0.0;   // mean of the positive deltas, 0 if none
  double mean_loss = 0.0;  // mean of the negative deltas, 0 if none
  int wins = 0, losses = 0, ties = 0;
};

inline WinRate win_rate(std::span<const double> deltas) {
  if (deltas.empty()) throw Error("win_rate: empty delta list");
  WinRate w;
  for (double d : deltas) {
    if (d > 0.0) {
      ++w.wins;
      w.mean_win += d;
    } else if (d < 0.0) {
      ++w.losses;
      w.mean_loss += d;
    } else {
      ++w.ties;
    }
  }
  if (w.wins) w.mean_win /= w.wins;
  if (w.losses) w.mean_loss /= w.losses;
  w.rate = static_cast<double>(w.wins) / static_cast<double>(deltas.size());
  return w;
}

/// Mean negative log-likelihood of the true class, probabilities floored at eps.
inline double log_loss(const Matrix& probs, std::span<const int> labels, double eps = 1e-15) {
  if (probs.rows() != labels.size() || probs.rows() == 0) throw Error("log_loss: bad shapes");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) s -= std::log(std::max(probs(i, static_cast<std::size_t>(labels[i])), eps));
  return s / static_cast<double>(probs.rows());
}

inline double accuracy(const Matrix& probs, std::span<const int> labels) {
  if (probs.rows() != labels.size() || probs.rows() == 0) throw Error("accuracy: bad shapes");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto r = probs.row(i);
    if (std::max_element(r.begin(), r.end()) - r.begin() == labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(probs.rows());
}

/// Null distribution of W+ for ranks given as doubled integers: entry s is the
/// probability that the doubled positive rank sum equals s.
inline std::vector<double> signed_rank_distribution(std::span<const long> doubled_ranks) {
  long total = 0;
  for (long r : doubled_ranks) total += r;
  std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
  count[0] = 1.0;
  long reach = 0;
  for (long r : doubled_ranks) {
    for (long s = reach; s >= 0; --s) count[static_cast<std::size_t>(s + r)] += count[static_cast<std::size_t>(s)];
    reach += r;
  }
  const double scale = std::ldexp(1.0, -static_cast<int>(doubled_ranks.size()));
  for (double& c : count) c *= scale;
  return count;
}

/// Exact two-sided p for a signed-rank statistic: P(min(W+, W-) <= W) under
/// random signs, computed as min(1, 2 P(W+ <= W)).
inline double wilcoxon_exact_p(std::span<const long> doubled_ranks, long doubled_w) {
  const auto dist = signed_rank_distribution(doubled_ranks);
  double tail = 0.0;
  for (long s = 0; s <= doubled_w && s < static_cast<long>(dist.size()); ++s) tail += dist[static_cast<std::size_t>(s)];
  return std::min(1.0, 2.0 * tail);
}

inline constexpr int kWilcoxonExactMax = 25;

/// Two-sided Wilcoxon signed-rank test. Zeros are dropped, tied magnitudes
/// share midranks, W = min(W+, W-).
inline StatResult wilcoxon_signed_rank(std::span<const double> deltas) {
  std::vector<double> nz;
  for (double d : deltas)
    if (d != 0.0) nz.push_back(d);
  if (nz.size() < 5) {
    throw Error("wilcoxon: need at least 5 nonzero deltas, got " + std::to_string(nz.size()));
  }
  std::vector<double> mag(nz.size());
  for (std::size_t i = 0; i < nz.size(); ++i) mag[i] = std::abs(nz[i]);
  const auto r = midranks(mag);
  const double n = static_cast<double>(nz.size());
  double w_plus = 0.0;
  for (std::size_t i = 0; i < nz.size(); ++i)
    if (nz[i] > 0.0) w_plus += r[i];
  const double w_minus = n * (n + 1.0) / 2.0 - w_plus;
  StatResult out;
  out.statistic = std::min(w_plus, w_minus);
  out.n_effective = static_cast<int>(nz.size());
  if (out.n_effective <= kWilcoxonExactMax) {
    std::vector<long> doubled(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) doubled[i] = std::lround(2.0 * r[i]);
    out.p_value = wilcoxon_exact_p(doubled, std::lround(2.0 * out.statistic));
    out.method = StatMethod::Exact;
    return out;
  }
  // Tie correction: sum over tie groups of (t^3 - t) / 48.
  std::vector<double> sorted = r;
  std::sort(sorted.begin(), sorted.end());
  double tie = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie += (t * t * t - t) / 48.0;
    i = j;
  }
  const double mean = n * (n + 1.0) / 4.0;
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie;
  const double z = std::max(0.0, std::abs(out.statistic - mean) - 0.5) / std::sqrt(var);
  out.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  out.method = StatMethod::NormalApproximation;
  return out;
}

/// Friedman test on a datasets x methods table, ranks within each dataset.
inline StatResult friedman(const Matrix& table) {
  const std::size_t n = table.rows(), k = table.cols();
  if (n < 2 || k < 2) throw Error("friedman: need at least 2 datasets and 2 methods");
  std::vector<double> R(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = table.row(i);
    const auto r = midranks(std::span<const double>(row.data(), row.size()));
    for (std::size_t j = 0; j < k; ++j) R[j] += r[j];
  }
  double ss = 0.0;
  for (double v : R) ss += v * v;
  const double dn = static_cast<double>(n), dk = static_cast<double>(k);
  double chi2 = 12.0 / (dn * dk * (dk + 1.0)) * ss - 3.0 * dn * (dk + 1.0);
  if (std::abs(chi2) < 1e-9) chi2 = 0.0;
  StatResult out;
  out.statistic = chi2;
  out.n_effective = static_cast<int>(n);
  out.method = StatMethod::NormalApproximation;
  out.p_value = chi2 <= 0.0 ? 1.0 : boost::math::gamma_q((dk - 1.0) / 2.0, chi2 / 2.0);
  return out;
}

/// Expected calibration error over equal-width bins of the max probability.
inline double ece(const Matrix& probs, std::span<const int> labels, int n_bins = 15) {
  if (probs.rows() == 0) throw Error("ece: empty input");
  if (probs.rows() != labels.size()) throw Error("ece: size mismatch");
  if (n_bins < 1) throw Error("ece: need at least one bin");
  std::vector<double> conf(static_cast<std::size_t>(n_bins), 0.0), acc(conf.size(), 0.0), cnt(conf.size(), 0.0);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto r = probs.row(i);
    const auto top = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    const double c = r[top];
    const auto b = static_cast<std::size_t>(std::clamp(static_cast<int>(c * n_bins), 0, n_bins - 1));
    conf[b] += c;
    acc[b] += static_cast<int>(top) == labels[i] ? 1.0 : 0.0;
    cnt[b] += 1.0;
  }
  double e = 0.0;
  for (std::size_t b = 0; b < cnt.size(); ++b)
    if (cnt[b] > 0.0) e += std::abs(acc[b] - conf[b]);
  return e / static_cast<double>(probs.rows());
}

/// p^(1/T) renormalized, for any T > 0 (T < 1 sharpens).
inline Matrix apply_temperature(const Matrix& probs, double T, double eps = 1e-12) {
  if (!(T > 0.0)) throw Error("apply_temperature: T must be positive");
  Matrix out(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto p = probs.row(i);
    auto o = out.row(i);
    double mx = -INFINITY;
    for (std::size_t c = 0; c < p.size(); ++c) {
      o[c] = std::log(std::max(p[c], eps)) / T;
      mx = std::max(mx, o[c]);
    }
    double s = 0.0;
    for (double& v : o) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : o) v /= s;
  }
  return out;
}

struct TemperatureFit {
  double temperature = 1.0;
  double nll_before = 0.0;  // validation NLL at T = 1
  double nll_after = 0.0;   // validation NLL at the returned temperature
  std::size_t n_validation = 0;
};

/// Post-hoc temperature scaling: golden-section search over [0.25, 8] for the
/// T minimizing NLL on a seeded stratified validation split. Falls back to
/// T = 1 when the search does not beat it.
inline TemperatureFit fit_temperature(const Matrix& probs, std::span<const int> labels, double val_fraction = 0.05,
                                      std::uint64_t seed = 0) {
  if (probs.rows() != labels.size()) throw Error("fit_temperature: size mismatch");
  const auto split = stratified_holdout(labels, val_fraction, derive_seed(seed, 0xCA1B));
  const auto& val = split.second;
  if (val.size() < 2) throw Error("fit_temperature: validation split has fewer than 2 rows");
  const Matrix vp = probs.select_rows(val);
  std::vector<int> vy;
  for (std::size_t i : val) vy.push_back(labels[i]);
  auto nll = [&](double T) { return log_loss(apply_temperature(vp, T), vy, 1e-300); };

  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = 0.25, b = 8.0;
  double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
  double f1 = nll(x1), f2 = nll(x2);
  for (int it = 0; it < 80 && b - a > 1e-6; ++it) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - phi * (b - a);
      f1 = nll(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + phi * (b - a);
      f2 = nll(x2);
    }
  }
  TemperatureFit fit;
  fit.n_validation = val.size();
  fit.nll_before = nll(1.0);
  const double t = f1 <= f2 ? x1 : x2;
  const double ft = nll(t);
  if (ft < fit.nll_before) {
    fit.temperature = t;
    fit.nll_after = ft;
  } else {
    fit.temperature = 1.0;
    fit.nll_after = fit.nll_before;
  }
  return fit;
}

struct FeatureSplit {
  double median_features = 0.0;
  int low_n = 0, high_n = 0;
  double low_mean_delta = 0.0, high_mean_delta = 0.0;
};

/// Splits datasets at the median feature count (ties go low) and reports the
/// mean subject-minus-baseline AUC delta per group.
inline FeatureSplit feature_split_analysis(std::span<const MetricRow> rows, const std::string& baseline,
                                           const std::string& subject) {
  std::vector<std::string> names;
  for (const auto& r : rows)
    if (std::find(names.begin(), names.end(), r.dataset) == names.end()) names.push_back(r.dataset);
  if (names.empty()) throw Error("feature_split_analysis: no rows");
  std::vector<double> feats, deltas;
  for (const auto& ds : names) {
    const MetricRow* b = nullptr;
    const MetricRow* s = nullptr;
    for (const auto& r : rows) {
      if (r.dataset != ds) continue;
      if (r.model == baseline) b = &r;
      if (r.model == subject) s = &r;
    }
    if (!b || !s) throw Error("feature_split_analysis: dataset '" + ds + "' lacks '" + (b ? subject : baseline) + "'");
    feats.push_back(static_cast<double>(s->n_features));
    deltas.push_back(s->auc - b->auc);
  }
  std::vector<double> sorted = feats;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  FeatureSplit out;
  out.median_features = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (feats[i] <= out.median_features) {
      ++out.low_n;
      out.low_mean_delta += deltas[i];
    } else {
      ++out.high_n;
      out.high_mean_delta += deltas[i];
    }
  }
  if (out.low_n) out.low_mean_delta /= out.low_n;
  if (out.high_n) out.high_mean_delta /= out.high_n;
  return out;
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
inline double sd_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace oofkd
