// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "oofkd/data.hpp"
#include "oofkd/gbdt.hpp"
#include "oofkd/loss.hpp"
#include "oofkd/random.hpp"
#include "oofkd/soft_labels.hpp"

namespace oofkd {

enum class Optimizer { Sgd, Adam };

struct MlpConfig {
  int embedding_dim = 0;           // 0: min(8d, 128)
  std::vector<int> hidden_widths;  // empty: two layers of clamp(4 sqrt(N), 32, 256)
  int epochs = 200;
  double warmup_fraction = 0.1;
  double base_lr = 1e-3;
  double dropout = 0.1;
  double label_smoothing = 0.05;
  double swa_fraction = 0.2;
  double collapse_factor = 0.05;  // threshold = collapse_factor * ln C
  int collapse_patience = 3;
  int max_restarts = 2;
  int batch_size = 0;  // 0: min(256, N / 4)
  double holdout_fraction = 0.1;
  Optimizer optimizer = Optimizer::Sgd;
  std::uint64_t seed = 0;
  /// Called with (attempt, epoch, parameters) for every SWA snapshot.
  std::function<void(int, int, std::span<const double>)> on_snapshot;

  void validate() const {
    auto frac = [](double v) { return v > 0.0 && v < 1.0; };
    if (epochs < 1) throw ConfigError("mlp epochs must be >= 1");
    if (!frac(warmup_fraction)) throw ConfigError("mlp warmup_fraction must be in (0, 1)");
    if (!frac(swa_fraction)) throw ConfigError("mlp swa_fraction must be in (0, 1)");
    if (!frac(holdout_fraction)) throw ConfigError("mlp holdout_fraction must be in (0, 1)");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("mlp dropout must be in [0, 1)");
    if (!(label_smoothing >= 0.0 && label_smoothing < 0.5)) throw ConfigError("mlp label_smoothing must be in [0, 0.5)");
    if (!(base_lr > 0.0)) throw ConfigError("mlp base_lr must be > 0");
    if (!(collapse_factor > 0.0 && collapse_factor < 1.0)) throw ConfigError("mlp collapse_factor must be in (0, 1)");
    if (collapse_patience < 1) throw ConfigError("mlp collapse_patience must be >= 1");
    if (max_restarts < 0) throw ConfigError("mlp max_restarts must be >= 0");
    if (embedding_dim < 0 || batch_size < 0) throw ConfigError("mlp sizes must be non-negative");
    for (int w : hidden_widths)
      if (w < 1) throw ConfigError("mlp hidden widths must be >= 1");
  }
};

inline std::size_t mlp_embedding_dim(std::size_t d) { return std::min<std::size_t>(8 * d, 128); }

inline int mlp_hidden_width(std::size_t n) {
  return std::clamp(static_cast<int>(std::lround(4.0 * std::sqrt(static_cast<double>(n)))), 32, 256);
}

/// Linear warmup over the first ceil(warmup_fraction * total) steps, reaching
/// base at the last warmup step, then cosine decay hitting 0 at step total-1.
inline double lr_at(std::size_t step, std::size_t total, double warmup_fraction, double base) {
  if (total == 0) return 0.0;
  const auto warm = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total))));
  if (step + 1 <= warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (total <= warm) return base;
  const double progress = static_cast<double>(step + 1 - warm) / static_cast<double>(total - warm);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

struct MlpFitInfo {
  int restarts = 0;
  bool restart_budget_exhausted = false;
  int chosen_attempt = 0;
  double final_dropout = 0.0;
  std::vector<double> holdout_entropy;  // per epoch of the chosen attempt
  double holdout_loss = 0.0;
};

/// Parameters live in one flat vector:
///   emb_w (d*e), emb_b (d*e), then for each dense layer W (out x in), b (out).
/// Dense layer 0 reads the concatenated embeddings (d*e inputs); the last
/// dense layer emits the logits.
struct MlpModel {
  std::size_t n_features = 0;
  int n_classes = 0;
  std::size_t embedding_dim = 0;
  std::vector<std::size_t> widths;  // dense layer output sizes, last == n_classes
  std::vector<double> params;
  Standardizer norm;
  bool swa_averaged = false;
  MlpFitInfo info;

  std::size_t emb_size() const { return n_features * embedding_dim; }
  std::size_t layer_in(std::size_t l) const { return l == 0 ? emb_size() : widths[l - 1]; }
  std::size_t layer_offset(std::size_t l) const {
    std::size_t off = 2 * emb_size();
    for (std::size_t k = 0; k < l; ++k) off += widths[k] * layer_in(k) + widths[k];
    return off;
  }
  std::size_t parameter_count() const { return layer_offset(widths.size()); }
};

namespace detail {

struct MlpTape {
  std::size_t batch = 0;
  std::vector<std::vector<double>> pre;   // per dense layer, batch x width
  std::vector<std::vector<double>> act;   // post ReLU and dropout, hidden layers only
  std::vector<std::vector<double>> mask;  // dropout multipliers, hidden layers only
};

inline void init_mlp(MlpModel& m, Rng& rng) {
  m.params.assign(m.parameter_count(), 0.0);
  const std::size_t E = m.emb_size();
  for (std::size_t i = 0; i < E; ++i) m.params[i] = rng.uniform(-1.0, 1.0);
  for (std::size_t l = 0; l < m.widths.size(); ++l) {
    const std::size_t in = m.layer_in(l), out = m.widths[l];
    const bool last = l + 1 == m.widths.size();
    const double bound = last ? std::sqrt(6.0 / static_cast<double>(in + out)) : std::sqrt(6.0 / static_cast<double>(in));
    double* w = m.params.data() + m.layer_offset(l);
    for (std::size_t i = 0; i < in * out; ++i) w[i] = rng.uniform(-bound, bound);
  }
}

/// Forward pass on standardized rows. With a tape the activations needed by
/// backprop are kept; with dropout > 0 and an rng, hidden units are dropped.
inline Matrix mlp_forward(const MlpModel& m, const Matrix& xs, MlpTape* tape, double dropout, Rng* rng) {
  const std::size_t B = xs.rows(), d = m.n_features, e = m.embedding_dim;
  const std::size_t L = m.widths.size();
  const double* P = m.params.data();
  const double* emb_w = P;
  const double* emb_b = P + m.emb_size();

  // The lift is linear, so layer 0 collapses to an h1 x d map per batch.
  const std::size_t h1 = m.widths[0];
  const double* W0 = P + m.layer_offset(0);
  const double* b0 = W0 + h1 * m.emb_size();
  std::vector<double> weff(h1 * d, 0.0), beff(b0, b0 + h1);
  for (std::size_t h = 0; h < h1; ++h) {
    const double* row = W0 + h * m.emb_size();
    for (std::size_t j = 0; j < d; ++j) {
      double sw = 0.0, sb = 0.0;
      for (std::size_t t = 0; t < e; ++t) {
        sw += row[j * e + t] * emb_w[j * e + t];
        sb += row[j * e + t] * emb_b[j * e + t];
      }
      weff[h * d + j] = sw;
      beff[h] += sb;
    }
  }

  if (tape) {
    tape->batch = B;
    tape->pre.assign(L, {});
    tape->act.assign(L, {});
    tape->mask.assign(L, {});
  }
  std::vector<double> cur(B * h1);
  for (std::size_t b = 0; b < B; ++b) {
    auto x = xs.row(b);
    for (std::size_t h = 0; h < h1; ++h) {
      double s = beff[h];
      const double* wr = weff.data() + h * d;
      for (std::size_t j = 0; j < d; ++j) s += wr[j] * x[j];
      cur[b * h1 + h] = s;
    }
  }

  const bool drop = dropout > 0.0 && rng != nullptr;
  const double keep_scale = drop ? 1.0 / (1.0 - dropout) : 1.0;
  for (std::size_t l = 0;; ++l) {
    const std::size_t width = m.widths[l];
    if (tape) tape->pre[l] = cur;
    if (l + 1 == L) break;
    std::vector<double> msk;
    if (drop) msk.resize(cur.size());
    for (std::size_t i = 0; i < cur.size(); ++i) {
      double v = std::max(cur[i], 0.0);
      if (drop) {
        msk[i] = rng->uniform() < dropout ? 0.0 : keep_scale;
        v *= msk[i];
      }
      cur[i] = v;
    }
    if (tape) {
      tape->act[l] = cur;
      tape->mask[l] = std::move(msk);
    }
    const std::size_t out = m.widths[l + 1];
    const double* W = P + m.layer_offset(l + 1);
    const double* bias = W + out * width;
    std::vector<double> nxt(B * out);
    for (std::size_t b = 0; b < B; ++b) {
      const double* a = cur.data() + b * width;
      for (std::size_t o = 0; o < out; ++o) {
        const double* wr = W + o * width;
        double s = bias[o];
        for (std::size_t i = 0; i < width; ++i) s += wr[i] * a[i];
        nxt[b * out + o] = s;
      }
    }
    cur = std::move(nxt);
  }
  Matrix logits(B, m.widths.back());
  std::copy(cur.begin(), cur.end(), logits.values().begin());
  return logits;
}

/// Accumulates d(loss)/d(params) given d(loss)/d(logits) and a tape.
inline void mlp_backward(const MlpModel& m, const Matrix& xs, const MlpTape& tape, const Matrix& dlogits,
                         std::vector<double>& grad) {
  const std::size_t B = tape.batch, d = m.n_features, e = m.embedding_dim;
  const std::size_t L = m.widths.size();
  const double* P = m.params.data();
  grad.assign(m.params.size(), 0.0);

  std::vector<double> delta(dlogits.values().begin(), dlogits.values().end());
  for (std::size_t l = L - 1; l >= 1; --l) {
    const std::size_t out = m.widths[l], in = m.widths[l - 1];
    const double* W = P + m.layer_offset(l);
    double* gW = grad.data() + m.layer_offset(l);
    double* gb = gW + out * in;
    const auto& a = tape.act[l - 1];
    std::vector<double> prev(B * in, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const double* ab = a.data() + b * in;
      double* pb = prev.data() + b * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double dv = delta[b * out + o];
        if (dv == 0.0) continue;
        gb[o] += dv;
        double* gr = gW + o * in;
        const double* wr = W + o * in;
        for (std::size_t i = 0; i < in; ++i) {
          gr[i] += dv * ab[i];
          pb[i] += dv * wr[i];
        }
      }
    }
    const auto& pre = tape.pre[l - 1];
    const auto& msk = tape.mask[l - 1];
    for (std::size_t i = 0; i < prev.size(); ++i) {
      if (pre[i] <= 0.0) prev[i] = 0.0;
      else if (!msk.empty()) prev[i] *= msk[i];
    }
    delta = std::move(prev);
  }

  // Layer 0 through the linear lift.
  const std::size_t h1 = m.widths[0], E = m.emb_size();
  std::vector<double> G(h1 * d, 0.0), g(h1, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    auto x = xs.row(b);
    for (std::size_t h = 0; h < h1; ++h) {
      const double dv = delta[b * h1 + h];
      if (dv == 0.0) continue;
      g[h] += dv;
      for (std::size_t j = 0; j < d; ++j) G[h * d + j] += dv * x[j];
    }
  }
  const double* emb_w = P;
  const double* emb_b = P + E;
  const double* W0 = P + m.layer_offset(0);
  double* g_emb_w = grad.data();
  double* g_emb_b = grad.data() + E;
  double* gW0 = grad.data() + m.layer_offset(0);
  double* gb0 = gW0 + h1 * E;
  for (std::size_t h = 0; h < h1; ++h) {
    gb0[h] += g[h];
    const double* wr = W0 + h * E;
    double* gr = gW0 + h * E;
    for (std::size_t j = 0; j < d; ++j) {
      const double Ghj = G[h * d + j];
      for (std::size_t t = 0; t < e; ++t) {
        const std::size_t k = j * e + t;
        gr[k] += emb_w[k] * Ghj + emb_b[k] * g[h];
        g_emb_w[k] += wr[k] * Ghj;
        g_emb_b[k] += wr[k] * g[h];
      }
    }
  }
}

inline Matrix softmax_rows(Matrix z) {
  for (std::size_t i = 0; i < z.rows(); ++i) softmax_inplace(z.row(i));
  return z;
}

}  // namespace detail

/// Builds an initialized model for d features, C classes and N training rows.
inline MlpModel make_mlp(std::size_t d, int C, std::size_t n_train, const MlpConfig& cfg, std::uint64_t seed) {
  if (d == 0) throw Error("mlp: no features");
  if (C < 2) throw Error("mlp: need at least two classes");
  MlpModel m;
  m.n_features = d;
  m.n_classes = C;
  m.embedding_dim = cfg.embedding_dim > 0 ? static_cast<std::size_t>(cfg.embedding_dim) : mlp_embedding_dim(d);
  if (cfg.hidden_widths.empty()) {
    const auto w = static_cast<std::size_t>(mlp_hidden_width(n_train));
    m.widths = {w, w};
  } else {
    for (int w : cfg.hidden_widths) m.widths.push_back(static_cast<std::size_t>(w));
  }
  m.widths.push_back(static_cast<std::size_t>(C));
  m.norm.mean.assign(d, 0.0);
  m.norm.scale.assign(d, 1.0);
  Rng rng(seed);
  detail::init_mlp(m, rng);
  return m;
}

/// Loss and gradient on one batch of standardized rows, for the given dropout
/// rng (nullptr: inference mode). Used by training and by gradient checks.
inline double mlp_loss_and_grad(const MlpModel& m, const Matrix& xs, const SoftLabelSet& teacher,
                                std::span<const int> labels, const LossConfig& loss, std::vector<double>& grad,
                                double dropout = 0.0, Rng* rng = nullptr) {
  detail::MlpTape tape;
  const Matrix logits = detail::mlp_forward(m, xs, &tape, dropout, rng);
  const Matrix dl = mixed_loss_grad(teacher, logits, labels, loss);
  detail::mlp_backward(m, xs, tape, dl, grad);
  return mixed_loss(teacher, detail::softmax_rows(logits), labels, loss);
}

inline Matrix predict_mlp(const MlpModel& m, const Matrix& features) {
  if (features.cols() != m.n_features) {
    throw Error("predict_mlp: expected " + std::to_string(m.n_features) + " features, got " +
                std::to_string(features.cols()));
  }
  return detail::softmax_rows(detail::mlp_forward(m, m.norm.apply(features), nullptr, 0.0, nullptr));
}

/// Trains the MLP student on the mixed objective. Features are standardized
/// with statistics stored in the model. `loss.label_smoothing` is replaced by
/// config.label_smoothing.
inline MlpModel fit_mlp(const Matrix& features, const SoftLabelSet& teacher, std::span<const int> labels,
                        LossConfig loss, const MlpConfig& cfg) {
  cfg.validate();
  loss.label_smoothing = cfg.label_smoothing;
  loss.validate();
  const std::size_t n = features.rows();
  if (teacher.size() != n || labels.size() != n) throw Error("fit_mlp: row count mismatch");
  if (!teacher.annotated()) throw Error("fit_mlp: soft labels are not annotated");
  if (n < 8) throw Error("fit_mlp: need at least 8 rows");
  const int C = teacher.n_classes();

  const Standardizer norm = Standardizer::fit(features);
  const Matrix xs = norm.apply(features);
  auto [train_rows, hold_rows] = stratified_holdout(labels, cfg.holdout_fraction, derive_seed(cfg.seed, 0x401D));
  if (hold_rows.empty()) {
    hold_rows.push_back(train_rows.back());
    train_rows.pop_back();
  }
  const Matrix hold_x = xs.select_rows(hold_rows);
  const SoftLabelSet hold_t = select_rows(teacher, hold_rows);
  std::vector<int> hold_y;
  for (std::size_t i : hold_rows) hold_y.push_back(labels[i]);
  LossConfig hold_loss = loss;
  hold_loss.reduction = Reduction::Mean;

  const std::size_t n_train = train_rows.size();
  const std::size_t batch =
      cfg.batch_size > 0 ? static_cast<std::size_t>(cfg.batch_size) : std::max<std::size_t>(1, std::min<std::size_t>(256, n_train / 4));
  const std::size_t steps_per_epoch = (n_train + batch - 1) / batch;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  const int swa_epochs = std::max(1, static_cast<int>(std::lround(cfg.swa_fraction * cfg.epochs)));
  const int swa_start = cfg.epochs - swa_epochs;
  const double threshold = cfg.collapse_factor * std::log(static_cast<double>(C));

  MlpModel best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> entropy_traces;
  int restarts = 0;
  bool exhausted = false;

  for (int attempt = 0; attempt <= cfg.max_restarts; ++attempt) {
    const double dropout = std::min(cfg.dropout + 0.1 * attempt, 0.9);
    MlpModel m = make_mlp(features.cols(), C, n_train, cfg, derive_seed(cfg.seed, 0x1A17 + static_cast<std::uint64_t>(attempt)));
    m.norm = norm;
    Rng rng(derive_seed(cfg.seed, 0xD20F + static_cast<std::uint64_t>(attempt)));
    std::vector<double> grad, swa_sum(m.params.size(), 0.0), adam_m, adam_v;
    if (cfg.optimizer == Optimizer::Adam) {
      adam_m.assign(m.params.size(), 0.0);
      adam_v.assign(m.params.size(), 0.0);
    }
    int swa_count = 0, low = 0;
    bool collapsed = false;
    std::vector<double> trace;
    std::vector<std::size_t> order = train_rows;
    std::size_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      rng.shuffle(std::span<std::size_t>(order));
      for (std::size_t s = 0; s < order.size(); s += batch) {
        const std::size_t e = std::min(order.size(), s + batch);
        std::span<const std::size_t> idx(order.data() + s, e - s);
        const Matrix bx = xs.select_rows(idx);
        const SoftLabelSet bt = select_rows(teacher, idx);
        std::vector<int> by;
        by.reserve(idx.size());
        for (std::size_t i : idx) by.push_back(labels[i]);
        const double l = mlp_loss_and_grad(m, bx, bt, by, loss, grad, dropout, &rng);
        if (!std::isfinite(l)) {
          throw Error("fit_mlp: non-finite loss at attempt " + std::to_string(attempt) + ", epoch " +
                      std::to_string(epoch) + ", step " + std::to_string(step));
        }
        const double lr = lr_at(step, total_steps, cfg.warmup_fraction, cfg.base_lr);
        if (cfg.optimizer == Optimizer::Adam) {
          const double t = static_cast<double>(step + 1);
          const double c1 = 1.0 - std::pow(0.9, t), c2 = 1.0 - std::pow(0.999, t);
          for (std::size_t p = 0; p < grad.size(); ++p) {
            adam_m[p] = 0.9 * adam_m[p] + 0.1 * grad[p];
            adam_v[p] = 0.999 * adam_v[p] + 0.001 * grad[p] * grad[p];
            m.params[p] -= lr * (adam_m[p] / c1) / (std::sqrt(adam_v[p] / c2) + 1e-8);
          }
        } else {
          for (std::size_t p = 0; p < grad.size(); ++p) m.params[p] -= lr * grad[p];
        }
        ++step;
      }

      if (epoch >= swa_start) {
        for (std::size_t p = 0; p < swa_sum.size(); ++p) swa_sum[p] += m.params[p];
        ++swa_count;
        if (cfg.on_snapshot) cfg.on_snapshot(attempt, epoch, m.params);
      }

      const Matrix hp = detail::softmax_rows(detail::mlp_forward(m, hold_x, nullptr, 0.0, nullptr));
      double h = 0.0;
      for (std::size_t i = 0; i < hp.rows(); ++i) h += entropy(hp.row(i));
      h /= static_cast<double>(hp.rows());
      if (!std::isfinite(h)) throw Error("fit_mlp: non-finite predictions at epoch " + std::to_string(epoch));
      trace.push_back(h);
      low = h < threshold ? low + 1 : 0;
      if (low >= cfg.collapse_patience) {
        collapsed = true;
        if (attempt < cfg.max_restarts) break;
      }
    }

    if (swa_count > 0 && !(collapsed && attempt < cfg.max_restarts)) {
      for (std::size_t p = 0; p < swa_sum.size(); ++p) m.params[p] = swa_sum[p] / static_cast<double>(swa_count);
      m.swa_averaged = true;
    }
    const double hl = mixed_loss(hold_t, detail::softmax_rows(detail::mlp_forward(m, hold_x, nullptr, 0.0, nullptr)),
                                 hold_y, hold_loss);
    m.info.final_dropout = dropout;
    m.info.chosen_attempt = attempt;
    m.info.holdout_entropy = trace;
    m.info.holdout_loss = hl;
    if (!collapsed) {
      best = std::move(m);
      break;
    }
    if (hl < best_loss || best.params.empty()) {
      best_loss = hl;
      best = std::move(m);
    }
    if (attempt < cfg.max_restarts) ++restarts;
    else exhausted = true;
  }
  best.info.restarts = restarts;
  best.info.restart_budget_exhausted = exhausted;
  return best;
}

inline constexpr const char* kMlpMagic = "oofkd-mlp";
inline constexpr int kMlpVersion = 1;

inline void save_mlp(std::ostream& out, const MlpModel& m) {
  out << kMlpMagic << ' ' << kMlpVersion << "\nn_features " << m.n_features << "\nn_classes " << m.n_classes
      << "\nembedding_dim " << m.embedding_dim << "\nswa_averaged " << (m.swa_averaged ? 1 : 0) << "\nwidths "
      << m.widths.size();
  for (auto w : m.widths) out << ' ' << w;
  out << "\nmean";
  for (double v : m.norm.mean) out << ' ' << detail::hexf(v);
  out << "\nscale";
  for (double v : m.norm.scale) out << ' ' << detail::hexf(v);
  out << "\nparams " << m.params.size() << '\n';
  for (std::size_t i = 0; i < m.params.size(); ++i) out << detail::hexf(m.params[i]) << ((i + 1) % 8 == 0 ? '\n' : ' ');
  out << "\nend\n";
}

inline MlpModel load_mlp(std::istream& in) {
  detail::expect(in, kMlpMagic);
  int version = 0;
  if (!(in >> version) || version != kMlpVersion) throw Error("model file: unsupported mlp version " + std::to_string(version));
  MlpModel m;
  int swa = 0;
  std::size_t nw = 0, np = 0;
  detail::expect(in, "n_features");
  in >> m.n_features;
  detail::expect(in, "n_classes");
  in >> m.n_classes;
  detail::expect(in, "embedding_dim");
  in >> m.embedding_dim;
  detail::expect(in, "swa_averaged");
  in >> swa;
  m.swa_averaged = swa != 0;
  detail::expect(in, "widths");
  in >> nw;
  if (!in || nw == 0 || nw > 64) throw Error("model file: bad layer count");
  m.widths.resize(nw);
  for (auto& w : m.widths) in >> w;
  detail::expect(in, "mean");
  m.norm.mean.resize(m.n_features);
  for (double& v : m.norm.mean) v = detail::read_hexf(in);
  detail::expect(in, "scale");
  m.norm.scale.resize(m.n_features);
  for (double& v : m.norm.scale) v = detail::read_hexf(in);
  detail::expect(in, "params");
  in >> np;
  if (!in || m.widths.back() != static_cast<std::size_t>(m.n_classes) || np != m.parameter_count()) {
    throw Error("model file: parameter count does not match the architecture");
  }
  m.params.resize(np);
  for (double& v : m.params) v = detail::read_hexf(in);
  detail::expect(in, "end");
  return m;
}

}  // namespace oofkd
