#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

struct GradCheckEntry {
  std::string label;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // 0 checks every coordinate; otherwise a seeded sample per parameter.
  std::size_t max_coords_per_param = 0;
  unsigned seed = 0;
};

using LossFn = std::function<Tensor(Tape&)>;

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
/// Gradients already stored on `params` are cleared. Throws NumericError if
/// the loss is not finite at any probe point.
GradCheckReport finite_diff_check(const LossFn& loss_fn, std::span<Tensor> params,
                                  const GradCheckOptions& options = {});

}  // namespace peftlab
