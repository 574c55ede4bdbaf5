#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/rank_allocator.hpp"
#include "peftlab/task.hpp"

namespace peftlab {

enum class Precision : std::uint8_t { f32, f64 };

/// PEFTLAB_PRECISION, defaulting to f64. Unknown values raise ValidationError.
Precision precision_from_env();

struct TrainConfig {
  std::optional<double> learning_rate;  // unset: 1e-3 for PEFT, 1e-4 for full fine-tuning
  int epochs = 3;
  int batch_size = 2;
  int grad_accumulation = 8;
  std::uint64_t seed = 0;
  double orth_weight = 0.1;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  long max_steps = 0;      // 0: run every epoch to completion
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Precision precision = Precision::f64;

  double lr_for(Method method) const;
  int effective_batch() const { return batch_size * grad_accumulation; }
  void validate() const;
};

/// Loss components of one optimizer step (means over its micro-batches).
struct StepRecord {
  long step = 0;
  int epoch = 0;
  double ce = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double orth = 0.0;
  double total = 0.0;
};

struct EvalMetrics {
  double in_domain_ter = 0.0;
  double ood_ter = 0.0;
};

struct TrainingRun {
  std::vector<StepRecord> steps;
  std::vector<ReallocationResult> reallocations;
  std::optional<BudgetSchedule> schedule;
  std::vector<RankReport> epoch_rank_reports;
  long total_steps = 0;
  std::size_t skipped_tracker_steps = 0;
  double wall_seconds = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, StepRecord snapshot)
      : std::runtime_error(what), snapshot_(snapshot) {}
  const StepRecord& snapshot() const { return snapshot_; }

 private:
  StepRecord snapshot_;
};

/// Sparsity and basis-norm penalty parts for S2-LoRA.
struct S2Penalty {
  Tensor l1;  // alpha1 * (1/N) * sum_i ||s_i||_1
  Tensor l2;  // alpha2 * (1/2r) * sum_pairs sum_k (||B[:,k]|| + ||A[k,:]||)
};
S2Penalty s2_penalty(Tape& tape, const S2LoRAAdapter& adapter);

/// ce + alpha1 and alpha2 terms.
Tensor total_loss(Tape& tape, const Tensor& ce, const S2LoRAAdapter& adapter);

/// ||B^T B - I||_F^2 + ||A A^T - I||_F^2.
Tensor orth_penalty(Tape& tape, const AdaLoRAState& state);

/// Mean token cross-entropy of a teacher-forced sample: decoder input is
/// BOS + tgt, labels are tgt + EOS.
Tensor sample_loss(Tape& tape, const Model& model, const Sample& sample, const ForwardOverrides* overrides);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double weight_decay = 0.0);
  void step();
  void zero_grad();
  long steps() const { return t_; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_, beta1_, beta2_, eps_, wd_;
  long t_ = 0;
};

struct TrainHooks {
  /// Called after each epoch with its index (0-based).
  std::function<void(int epoch)> on_epoch_end;
  /// Called after every reallocation.
  std::function<void(const ReallocationResult&)> on_reallocate;
};

/// Trains the adapter's parameters on `train`. Deterministic given tcfg.seed.
TrainingRun run_training(AdaptedModel& model, const TrainConfig& tcfg, std::span<const Sample> train,
                         const TrainHooks& hooks = {});

std::size_t edit_distance(std::span<const int> a, std::span<const int> b);

/// Summed Levenshtein distance of greedy decodes over summed reference length.
double token_error_rate(const Model& model, std::span<const Sample> set, const ForwardOverrides* overrides = nullptr);
double token_error_rate(const AdaptedModel& model, std::span<const Sample> set);

}  // namespace peftlab
