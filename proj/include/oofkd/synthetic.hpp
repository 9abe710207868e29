// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "oofkd/data.hpp"
#include "oofkd/random.hpp"

namespace oofkd {

struct MixtureSpec {
  std::string name = "mixture";
  std::size_t n = 2000;
  std::size_t d = 10;
  int classes = 5;
  /// Standard deviation of the class centers around the origin; points have
  /// unit variance around their center.
  double separation = 1.0;
  /// Fraction of rows whose label is replaced by a different random class.
  double label_noise = 0.0;
  std::uint64_t seed = 0;
};

/// Balanced Gaussian mixture: row i belongs to class i mod C before noise.
inline Dataset make_mixture(const MixtureSpec& spec) {
  if (spec.classes < 2) throw Error("mixture needs at least two classes");
  Rng rng(derive_seed(spec.seed, 0x5EED));
  Matrix centers(static_cast<std::size_t>(spec.classes), spec.d);
  for (double& v : centers.values()) v = spec.separation * rng.normal();

  Dataset ds;
  ds.name = spec.name;
  ds.n_classes = spec.classes;
  ds.features = Matrix(spec.n, spec.d);
  ds.labels.resize(spec.n);
  ds.row_ids.resize(spec.n);
  for (std::size_t j = 0; j < spec.d; ++j) {
    ds.feature_names.push_back("x" + std::to_string(j));
    ds.categorical.push_back(false);
  }
  for (int c = 0; c < spec.classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
  for (std::size_t i = 0; i < spec.n; ++i) {
    const int y = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
    for (std::size_t j = 0; j < spec.d; ++j) ds.features(i, j) = centers(static_cast<std::size_t>(y), j) + rng.normal();
    ds.labels[i] = y;
    ds.row_ids[i] = i;
  }
  if (spec.label_noise > 0.0) {
    Rng flip(derive_seed(spec.seed, 0xF11B));
    for (auto& y : ds.labels) {
      if (flip.uniform() < spec.label_noise) {
        const int shift = 1 + static_cast<int>(flip.below(static_cast<std::uint64_t>(spec.classes - 1)));
        y = (y + shift) % spec.classes;
      }
    }
  }
  return ds;
}

/// Replaces a fraction of the given rows' labels with a different class.
inline void flip_labels(Dataset& ds, double fraction, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xF11B));
  for (auto& y : ds.labels) {
    if (rng.uniform() < fraction) {
      const int shift = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(ds.n_classes - 1)));
      y = (y + shift) % ds.n_classes;
    }
  }
}

}  // namespace oofkd
