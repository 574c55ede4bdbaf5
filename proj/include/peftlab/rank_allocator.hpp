#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "peftlab/adapters.hpp"

namespace peftlab {

/// Smoothed sensitivity (I-bar) and uncertainty (U-bar) per tracked tensor.
///
/// Slots are sized on first update. The importance of an element is the
/// product I-bar * U-bar.
class ImportanceTracker {
 public:
  explicit ImportanceTracker(double beta1 = 0.85, double beta2 = 0.85);

  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }

  /// One update from (value, gradient) pairs, one pair per slot. Returns false
  /// and leaves the state untouched when any gradient is non-finite.
  bool update(std::span<const std::span<const double>> values,
              std::span<const std::span<const double>> grads);
  /// Convenience: values and current gradients of `tensors`.
  bool update(std::span<const Tensor> tensors);

  std::size_t slots() const { return ibar_.size(); }
  std::size_t steps() const { return steps_; }
  std::size_t skipped_steps() const { return skipped_; }

  const std::vector<double>& ibar(std::size_t slot) const { return ibar_.at(slot); }
  const std::vector<double>& ubar(std::size_t slot) const { return ubar_.at(slot); }
  double importance(std::size_t slot, std::size_t i) const { return ibar_.at(slot)[i] * ubar_.at(slot)[i]; }

  /// Direct state access, for tests and restoring snapshots.
  void set_state(std::vector<std::vector<double>> ibar, std::vector<std::vector<double>> ubar);

 private:
  double beta1_;
  double beta2_;
  std::vector<std::vector<double>> ibar_;
  std::vector<std::vector<double>> ubar_;
  std::size_t steps_ = 0;
  std::size_t skipped_ = 0;
};

/// Tracker slot layout for AdaLoRA: site i owns slots 3i (B), 3i+1 (lambda), 3i+2 (A).
std::vector<Tensor> adalora_tracked_tensors(const AdaLoRAAdapter& adapter);

/// importance(lambda_k) + mean importance(B[:,k]) + mean importance(A[k,:]).
double triplet_importance(const ImportanceTracker& tracker, std::size_t site, std::size_t k,
                          std::size_t rank, std::size_t b_rows, std::size_t a_cols);

struct BudgetSchedule {
  long b_init = 0;
  long b_target = 0;
  long t_warmup = 0;
  long t_final = 0;
  long total_steps = 0;

  /// Warmup over the first 10% of steps, target reached at 70%.
  static BudgetSchedule standard(long b_init, long b_target, long total_steps);
  void validate() const;
};

/// Cubic decay from b_init to b_target between t_warmup and t_final.
long budget_at(long t, const BudgetSchedule& schedule);

struct ReallocationResult {
  std::size_t budget = 0;
  std::vector<double> scores;   // (site, k) in registry order
  std::vector<bool> retained;   // same order
  double min_retained = 0.0;    // +inf when nothing retained
  double max_masked = 0.0;      // -inf when nothing masked
};

/// Indices of the `budget` largest scores; ties go to the lower index.
std::vector<bool> select_top(std::span<const double> scores, std::size_t budget);

/// Globally keeps the `budget` most important triplets and masks the rest.
ReallocationResult reallocate(const ImportanceTracker& tracker, AdaLoRAAdapter& adapter, std::size_t budget);

struct RankPanel {
  ModuleGroup group = ModuleGroup::EncSam;
  std::vector<Role> roles;         // q,v,k,o or fc1,fc2
  std::vector<std::vector<int>> cells;  // [role][layer]
};

struct RankReport {
  Method method = Method::s2lora;
  double threshold = 1e-4;
  int max_rank = 0;
  std::vector<RankPanel> panels;  // one per module group, registry order

  long total() const;
};

/// Rank distribution of an S2-LoRA or AdaLoRA adapter. Throws ValidationError
/// for other methods or a negative threshold.
RankReport rank_report(const Adapter& adapter, double threshold = 1e-4);

/// RFC 4180 CSV: one block per panel, header row of layer indices.
void write_rank_csv(std::ostream& out, const RankReport& report);
/// Grayscale heatmap, cell shade = rank / max rank.
void write_rank_svg(std::ostream& out, const RankReport& report);

}  // namespace peftlab
