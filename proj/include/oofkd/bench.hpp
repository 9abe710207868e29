// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#if defined(__linux__)
#include <sched.h>
#endif

#include "oofkd/error.hpp"
#include "oofkd/matrix.hpp"
#include "oofkd/parallel.hpp"

namespace oofkd {

struct BenchConfig {
  std::size_t batch_size = 1000;
  int warmup = 10;
  int iters = 100;
  bool pin_core = false;
  int core = 0;
  /// Batches faster than this are repeated inside one timed sample.
  double min_sample_ms = 0.1;
};

struct LatencySample {
  std::string dataset;
  double mean_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  std::vector<double> samples_ms;  // per-batch times, one per measured iteration
  int inner_reps = 1;
  long thread_activations = 0;     // worker threads started inside the measured region
};

struct LatencyReport {
  std::string model;
  std::vector<LatencySample> per_dataset;
  double macro_mean_ms = 0.0;
  std::size_t batch_size = 0;
  int warmup_iters = 0;
  int measured_iters = 0;
  bool pinned = false;
};

inline double macro_mean(std::span<const double> per_dataset_ms) {
  if (per_dataset_ms.empty()) return 0.0;
  double s = 0.0;
  for (double v : per_dataset_ms) s += v;
  return s / static_cast<double>(per_dataset_ms.size());
}

inline double speedup(double teacher_ms, double student_ms) {
  if (!(student_ms > 0.0)) throw Error("speedup: student latency must be positive");
  return teacher_ms / student_ms;
}

/// A fixed batch of exactly `batch_size` rows, cycling through `x`.
inline Matrix make_batch(const Matrix& x, std::size_t batch_size) {
  if (x.rows() == 0) throw Error("make_batch: empty matrix");
  Matrix b(batch_size, x.cols());
  for (std::size_t i = 0; i < batch_size; ++i) {
    auto src = x.row(i % x.rows());
    std::copy(src.begin(), src.end(), b.row(i).begin());
  }
  return b;
}

namespace detail {

/// Pins the calling thread to one core for its lifetime, restoring the
/// previous mask afterwards. Does nothing where affinity is unsupported.
class CorePin {
 public:
  CorePin(bool enable, int core) {
#if defined(__linux__)
    if (!enable) return;
    if (sched_getaffinity(0, sizeof old_, &old_) != 0) return;
    cpu_set_t set;
    CPU_ZERO(&set);
    CPU_SET(core, &set);
    active_ = sched_setaffinity(0, sizeof set, &set) == 0;
#else
    (void)enable;
    (void)core;
#endif
  }
  ~CorePin() {
#if defined(__linux__)
    if (active_) sched_setaffinity(0, sizeof old_, &old_);
#endif
  }
  CorePin(const CorePin&) = delete;
  CorePin& operator=(const CorePin&) = delete;
  bool active() const { return active_; }

 private:
  bool active_ = false;
#if defined(__linux__)
  cpu_set_t old_{};
#endif
};

inline volatile double bench_sink = 0.0;

}  // namespace detail

/// Times `predict(batch)` on the calling thread: `warmup` untimed calls, then
/// `iters` timed samples on a monotone clock.
template <class Predict>
LatencySample time_batch(const std::string& dataset, const Matrix& batch, Predict&& predict, const BenchConfig& cfg) {
  if (cfg.iters < 1 || cfg.warmup < 0) throw Error("bench: iters must be >= 1 and warmup >= 0");
  using clock = std::chrono::steady_clock;
  auto consume = [](const Matrix& m) {
    if (!m.empty()) detail::bench_sink = detail::bench_sink + m.values()[0];
  };
  for (int i = 0; i < cfg.warmup; ++i) consume(predict(batch));

  LatencySample s;
  s.dataset = dataset;
  const auto t0 = clock::now();
  consume(predict(batch));
  const double probe = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  if (probe < cfg.min_sample_ms) {
    s.inner_reps = static_cast<int>(std::ceil(cfg.min_sample_ms / std::max(probe, 1e-6)));
    s.inner_reps = std::clamp(s.inner_reps, 1, 100000);
  }

  const long threads_before = thread_activations().load();
  s.samples_ms.reserve(static_cast<std::size_t>(cfg.iters));
  for (int i = 0; i < cfg.iters; ++i) {
    const auto a = clock::now();
    for (int r = 0; r < s.inner_reps; ++r) consume(predict(batch));
    const auto b = clock::now();
    s.samples_ms.push_back(std::chrono::duration<double, std::milli>(b - a).count() / s.inner_reps);
  }
  s.thread_activations = thread_activations().load() - threads_before;
  s.mean_ms = macro_mean(s.samples_ms);
  s.min_ms = *std::min_element(s.samples_ms.begin(), s.samples_ms.end());
  s.max_ms = *std::max_element(s.samples_ms.begin(), s.samples_ms.end());
  // The mean of the samples can round outside [min, max] by an ulp.
  s.mean_ms = std::clamp(s.mean_ms, s.min_ms, s.max_ms);
  return s;
}

/// Per-dataset latency for one model over (dataset name, feature matrix)
/// pairs, with the macro mean across datasets.
template <class Predict>
LatencyReport measure_latency(const std::string& model, const std::vector<std::pair<std::string, Matrix>>& datasets,
                              Predict&& predict, const BenchConfig& cfg = {}) {
  if (datasets.empty()) throw Error("measure_latency: no datasets");
  LatencyReport rep;
  rep.model = model;
  rep.batch_size = cfg.batch_size;
  rep.warmup_iters = cfg.warmup;
  rep.measured_iters = cfg.iters;
  detail::CorePin pin(cfg.pin_core, cfg.core);
  rep.pinned = pin.active();
  std::vector<double> means;
  for (const auto& [name, x] : datasets) {
    const Matrix batch = make_batch(x, cfg.batch_size);
    rep.per_dataset.push_back(time_batch(name, batch, predict, cfg));
    means.push_back(rep.per_dataset.back().mean_ms);
  }
  rep.macro_mean_ms = macro_mean(means);
  return rep;
}

}  // namespace oofkd
