// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "oofkd/error.hpp"
#include "oofkd/matrix.hpp"
#include "oofkd/soft_labels.hpp"

namespace oofkd {

enum class Reduction { Sum, Mean };

struct LossConfig {
  double alpha = 0.7;
  double label_smoothing = 0.0;
  double epsilon_floor = 1e-6;
  Reduction reduction = Reduction::Sum;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
    if (!(label_smoothing >= 0.0 && label_smoothing < 0.5)) throw ConfigError("label_smoothing must be in [0, 0.5)");
    if (!(epsilon_floor > 0.0 && epsilon_floor < 1.0)) throw ConfigError("epsilon_floor must be in (0, 1)");
  }
};

/// Counts evaluations of the KL term on the calling thread (values through
/// kl() and per-row gradients through mixed_loss_grad()); lets callers verify
/// that the hard-label configuration never touches the distillation term.
inline long& kl_evaluations() {
  static thread_local long count = 0;
  return count;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// softmax(ln(max(p, eps)) / T): the distribution p^(1/T), renormalized.
inline std::vector<double> temper(std::span<const double> p, double T, double eps = 1e-6) {
  if (!(T >= 1.0)) throw Error("temper: temperature must be >= 1");
  std::vector<double> out(p.size());
  double mx = -INFINITY;
  for (std::size_t c = 0; c < p.size(); ++c) {
    out[c] = std::log(std::max(p[c], eps)) / T;
    mx = std::max(mx, out[c]);
  }
  double s = 0.0;
  for (double& v : out) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : out) v /= s;
  return out;
}

/// KL(p || q) in nats with 0 ln 0 = 0 and q floored at eps.
inline double kl(std::span<const double> p, std::span<const double> q, double eps = 1e-6) {
  if (p.size() != q.size()) throw Error("kl: dimension mismatch");
  ++kl_evaluations();
  double s = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (p[c] > 0.0) s += p[c] * (std::log(p[c]) - std::log(std::max(q[c], eps)));
  }
  return std::max(s, 0.0);
}

/// (1 - s) * one_hot(y) + s / C.
inline std::vector<double> smooth_target(int y, int C, double s) {
  std::vector<double> t(static_cast<std::size_t>(C), s / C);
  t[static_cast<std::size_t>(y)] += 1.0 - s;
  return t;
}

inline std::vector<double> softmax(std::span<const double> z, double T = 1.0) {
  std::vector<double> out(z.size());
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    out[c] = std::exp((z[c] - mx) / T);
    s += out[c];
  }
  for (double& v : out) v /= s;
  return out;
}

namespace detail {
inline void softmax_inplace(std::span<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : z) v /= s;
}

inline void check_loss_shapes(const SoftLabelSet& teacher, const Matrix& student, std::span<const int> labels) {
  if (!teacher.annotated()) throw Error("mixed loss: soft labels are not annotated");
  if (student.rows() != teacher.size() || student.cols() != teacher.probs.cols() || labels.size() != teacher.size()) {
    throw Error("mixed loss: shape mismatch");
  }
}
}  // namespace detail

/// alpha * sum_i w_i T_i^2 KL(temper(p_i, T_i) || temper(q_i, T_i))
///   + (1 - alpha) * sum_i w_i CE(target_i, q_i)
/// where target_i is the (optionally smoothed) one-hot label. The KL term is
/// skipped entirely when alpha == 0.
inline double mixed_loss(const SoftLabelSet& teacher, const Matrix& student_probs, std::span<const int> labels,
                         const LossConfig& cfg) {
  detail::check_loss_shapes(teacher, student_probs, labels);
  const int C = teacher.n_classes();
  const double eps = cfg.epsilon_floor;
  double total = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const double w = teacher.weight[i];
    const double T = teacher.temperature[i];
    auto q = student_probs.row(i);
    if (cfg.alpha > 0.0) {
      const auto pt = temper(teacher.probs.row(i), T, eps);
      const auto qt = temper(q, T, eps);
      total += cfg.alpha * w * T * T * kl(pt, qt, eps);
    }
    if (cfg.alpha < 1.0) {
      const auto target = smooth_target(labels[i], C, cfg.label_smoothing);
      double ce = 0.0;
      for (int c = 0; c < C; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        if (target[cc] > 0.0) ce -= target[cc] * std::log(std::max(q[cc], eps));
      }
      total += (1.0 - cfg.alpha) * w * ce;
    }
  }
  if (cfg.reduction == Reduction::Mean && teacher.size() > 0) total /= static_cast<double>(teacher.size());
  return total;
}

/// Gradient of mixed_loss with respect to the student logits, where the
/// student distribution is softmax(logits). Per row:
///   alpha * w_i * T_i * (softmax(z_i / T_i) - temper(p_i, T_i))
///   + (1 - alpha) * w_i * (softmax(z_i) - target_i)
/// The T_i^2 factor of the loss meets the 1/T_i of the tempered softmax, so a
/// single T_i remains.
inline Matrix mixed_loss_grad(const SoftLabelSet& teacher, const Matrix& logits, std::span<const int> labels,
                              const LossConfig& cfg) {
  detail::check_loss_shapes(teacher, logits, labels);
  const int C = teacher.n_classes();
  Matrix g(logits.rows(), logits.cols(), 0.0);
  const double scale = cfg.reduction == Reduction::Mean && teacher.size() > 0 ? 1.0 / static_cast<double>(teacher.size()) : 1.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto z = logits.row(i);
    for (double v : z)
      if (!std::isfinite(v)) throw Error("mixed_loss_grad: non-finite logit in row " + std::to_string(i));
    const double w = teacher.weight[i] * scale;
    const double T = teacher.temperature[i];
    auto gi = g.row(i);
    if (cfg.alpha > 0.0) {
      ++kl_evaluations();
      const auto pt = temper(teacher.probs.row(i), T, cfg.epsilon_floor);
      const auto qt = softmax(z, T);
      for (int c = 0; c < C; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        gi[cc] += cfg.alpha * w * T * (qt[cc] - pt[cc]);
      }
    }
    if (cfg.alpha < 1.0) {
      const auto q = softmax(z);
      const auto target = smooth_target(labels[i], C, cfg.label_smoothing);
      for (int c = 0; c < C; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        gi[cc] += (1.0 - cfg.alpha) * w * (q[cc] - target[cc]);
      }
    }
  }
  return g;
}

}  // namespace oofkd
