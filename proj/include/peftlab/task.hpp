#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace peftlab {

enum class TaskKind : std::uint8_t { copy, reverse, remap };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct Sample {
  std::vector<int> src;
  std::vector<int> tgt;
  bool operator==(const Sample&) const = default;
};

enum class DataSize : std::uint8_t { small, medium, large };
std::string_view to_string(DataSize size);
DataSize parse_data_size(std::string_view name);

/// Synthetic sequence-transduction task. Pretraining teaches copying; the
/// adaptation domain applies a fixed token permutation to the targets and the
/// out-of-domain set uses a second permutation never seen in training.
struct TaskSpec {
  TaskKind kind = TaskKind::remap;
  int payload_vocab = 32;
  int min_len = 4;
  int max_len = 16;
  int n_pretrain = 4096;
  int n_adapt_small = 256;
  int n_adapt_medium = 1024;
  int n_adapt_large = 4096;
  int n_eval = 128;
  std::uint64_t perm_seed = 2024;
  // Share of pretraining samples drawn from the adaptation domain, so the
  // base model has seen the shifted domain a little (zero-shot is not chance).
  double pretrain_shift_fraction = 0.1;
  // Share of tokens whose mapping the out-of-domain permutation changes.
  double ood_swap_fraction = 0.25;

  void validate() const;
  int adapt_size(DataSize size) const;
  /// Highest token id used (payload ids start after the special tokens).
  int max_token() const;
};

struct TaskData {
  std::vector<Sample> pretrain;
  std::vector<Sample> adapt_train;
  std::vector<Sample> in_domain_eval;
  std::vector<Sample> ood_eval;
  std::vector<int> permutation;      // adaptation domain, indexed by payload offset
  std::vector<int> ood_permutation;
};

/// Derangement of the payload tokens drawn from `seed`.
std::vector<int> make_permutation(int payload_vocab, std::uint64_t seed);
/// `base` with roughly `fraction` of its entries re-paired by swaps.
std::vector<int> perturb_permutation(std::span<const int> base, double fraction, std::uint64_t seed);

/// Maps every payload token through `perm` (perm[t - first_payload]).
std::vector<int> apply_permutation(std::span<const int> seq, std::span<const int> perm);

/// Target of `src` under the task relation with the given permutation.
std::vector<int> task_target(TaskKind kind, std::span<const int> src, std::span<const int> perm);

/// Deterministic, pairwise-disjoint splits (no source sequence repeats).
TaskData make_task(const TaskSpec& spec, std::uint64_t seed, DataSize size = DataSize::small);

}  // namespace peftlab
