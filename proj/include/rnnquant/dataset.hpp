// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rnnquant/date.hpp"
#include "rnnquant/numerics.hpp"

namespace rnnquant {

/// Supervised windows X[N x L x F] with scalar targets y[N].
///
/// Each sample keeps its provenance: the symbol, the anchor date whose
/// features close the window, and the date on which the label is realised.
struct SequenceDataset {
  std::size_t window = 0;
  std::size_t features = 0;
  std::vector<Matrix> inputs;  // each window x features, oldest row first
  std::vector<double> targets;
  std::vector<std::size_t> symbols;
  std::vector<Date> anchor_dates;
  std::vector<Date> label_dates;
  std::vector<Date> first_dates;  // date of the oldest row in each window

  std::size_t size() const noexcept { return inputs.size(); }
  bool empty() const noexcept { return inputs.empty(); }

  void append(const SequenceDataset& other) {
    inputs.insert(inputs.end(), other.inputs.begin(), other.inputs.end());
    targets.insert(targets.end(), other.targets.begin(), other.targets.end());
    symbols.insert(symbols.end(), other.symbols.begin(), other.symbols.end());
    anchor_dates.insert(anchor_dates.end(), other.anchor_dates.begin(), other.anchor_dates.end());
    label_dates.insert(label_dates.end(), other.label_dates.begin(), other.label_dates.end());
    first_dates.insert(first_dates.end(), other.first_dates.begin(), other.first_dates.end());
  }
};

}  // namespace rnnquant
