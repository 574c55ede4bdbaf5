#include "peftlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace peftlab {

namespace {

double eval_loss(const LossFn& loss_fn) {
  Tape tape(false);
  const double value = loss_fn(tape).item();
  if (!std::isfinite(value)) throw NumericError("finite_diff_check: non-finite loss");
  return value;
}

}  // namespace

GradCheckReport finite_diff_check(const LossFn& loss_fn, std::span<Tensor> params,
                                  const GradCheckOptions& options) {
  for (Tensor& p : params) p.zero_grad();
  {
    Tape tape;
    Tensor loss = loss_fn(tape);
    if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite loss");
    tape.backward(loss);
  }

  std::mt19937 rng(options.seed);
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param != 0 && coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
    }

    GradCheckEntry entry;
    entry.label = "param" + std::to_string(pi) + shape_to_string(p.shape());
    auto values = p.data();
    for (std::size_t c : coords) {
      const double saved = values[c];
      values[c] = saved + options.step;
      const double plus = eval_loss(loss_fn);
      values[c] = saved - options.step;
      const double minus = eval_loss(loss_fn);
      values[c] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double err = std::abs(analytic[c] - numeric) / std::max(1.0, std::abs(numeric));
      entry.max_rel_error = std::max(entry.max_rel_error, err);
      ++entry.coords_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.params.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace peftlab
