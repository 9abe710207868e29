// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "oofkd/matrix.hpp"

namespace oofkd {

struct Provenance {
  std::vector<std::string> teachers;
  std::string fold_plan_hash;
  bool leaky = false;
};

/// Per-row teacher distributions plus the per-row annotations consumed by
/// the student loss. `source_fold[i]` is the fold whose complement the
/// contributing teachers were fit on (-1 for leaky labels, where the teachers
/// saw every row).
struct SoftLabelSet {
  Matrix probs;
  std::vector<double> entropy;
  std::vector<double> temperature;
  std::vector<double> weight;
  std::vector<int> source_fold;
  Provenance provenance;

  std::size_t size() const { return probs.rows(); }
  int n_classes() const { return static_cast<int>(probs.cols()); }
  bool annotated() const {
    return entropy.size() == size() && temperature.size() == size() && weight.size() == size();
  }
};

/// Rows `idx` of a label set, annotations included when present.
inline SoftLabelSet select_rows(const SoftLabelSet& s, std::span<const std::size_t> idx) {
  SoftLabelSet out;
  out.probs = s.probs.select_rows(idx);
  out.provenance = s.provenance;
  const bool ann = s.annotated();
  for (std::size_t i : idx) {
    if (ann) {
      out.entropy.push_back(s.entropy[i]);
      out.temperature.push_back(s.temperature[i]);
      out.weight.push_back(s.weight[i]);
    }
    if (i < s.source_fold.size()) out.source_fold.push_back(s.source_fold[i]);
  }
  return out;
}

}  // namespace oofkd
