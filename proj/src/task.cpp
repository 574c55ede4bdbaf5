#include "peftlab/task.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include "peftlab/transformer.hpp"

namespace peftlab {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::remap: return "remap";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  for (TaskKind k : {TaskKind::copy, TaskKind::reverse, TaskKind::remap}) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown task kind '" + std::string(name) + "'; valid kinds: copy, reverse, remap");
}

std::string_view to_string(DataSize size) {
  switch (size) {
    case DataSize::small: return "small";
    case DataSize::medium: return "medium";
    case DataSize::large: return "large";
  }
  return "?";
}

DataSize parse_data_size(std::string_view name) {
  for (DataSize s : {DataSize::small, DataSize::medium, DataSize::large}) {
    if (to_string(s) == name) return s;
  }
  throw ValidationError("unknown data size '" + std::string(name) + "'; valid sizes: small, medium, large");
}

void TaskSpec::validate() const {
  if (payload_vocab < 2) throw ValidationError("task.payload_vocab must be at least 2");
  if (min_len < 1 || max_len < min_len) throw ValidationError("task lengths need 1 <= min_len <= max_len");
  if (n_pretrain < 1 || n_adapt_small < 1 || n_adapt_medium < n_adapt_small || n_adapt_large < n_adapt_medium) {
    throw ValidationError("task sizes must be positive and small <= medium <= large");
  }
  if (n_eval < 1) throw ValidationError("task.n_eval must be positive");
  if (pretrain_shift_fraction < 0.0 || pretrain_shift_fraction > 1.0) {
    throw ValidationError("task.pretrain_shift_fraction must lie in [0, 1]");
  }
  if (ood_swap_fraction <= 0.0 || ood_swap_fraction > 1.0) {
    throw ValidationError("task.ood_swap_fraction must lie in (0, 1]");
  }
}

int TaskSpec::adapt_size(DataSize size) const {
  switch (size) {
    case DataSize::small: return n_adapt_small;
    case DataSize::medium: return n_adapt_medium;
    case DataSize::large: return n_adapt_large;
  }
  return n_adapt_small;
}

int TaskSpec::max_token() const { return tokens::kFirstPayload + payload_vocab - 1; }

std::vector<int> make_permutation(int payload_vocab, std::uint64_t seed) {
  std::vector<int> perm(static_cast<std::size_t>(payload_vocab));
  std::iota(perm.begin(), perm.end(), tokens::kFirstPayload);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  // Remove fixed points so every token is shifted.
  const std::size_t n = perm.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (perm[i] == static_cast<int>(i) + tokens::kFirstPayload) std::swap(perm[i], perm[(i + 1) % n]);
  }
  return perm;
}

std::vector<int> perturb_permutation(std::span<const int> base, double fraction, std::uint64_t seed) {
  std::vector<int> perm(base.begin(), base.end());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(perm.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto touched = std::max<std::size_t>(
      2, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(perm.size()))));
  const std::size_t pairs = std::min(touched, perm.size()) / 2;
  for (std::size_t p = 0; p < pairs; ++p) std::swap(perm[idx[2 * p]], perm[idx[2 * p + 1]]);
  return perm;
}

std::vector<int> apply_permutation(std::span<const int> seq, std::span<const int> perm) {
  std::vector<int> out(seq.begin(), seq.end());
  for (int& t : out) {
    const int off = t - tokens::kFirstPayload;
    if (off >= 0 && static_cast<std::size_t>(off) < perm.size()) t = perm[static_cast<std::size_t>(off)];
  }
  return out;
}

std::vector<int> task_target(TaskKind kind, std::span<const int> src, std::span<const int> perm) {
  switch (kind) {
    case TaskKind::copy: return {src.begin(), src.end()};
    case TaskKind::reverse: {
      std::vector<int> rev(src.rbegin(), src.rend());
      return apply_permutation(rev, perm);
    }
    case TaskKind::remap: return apply_permutation(src, perm);
  }
  return {};
}

TaskData make_task(const TaskSpec& spec, std::uint64_t seed, DataSize size) {
  spec.validate();
  TaskData data;
  data.permutation = make_permutation(spec.payload_vocab, spec.perm_seed);
  data.ood_permutation = perturb_permutation(data.permutation, spec.ood_swap_fraction, spec.perm_seed + 1);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> tok_dist(tokens::kFirstPayload, spec.max_token());
  std::set<std::vector<int>> used;
  auto fresh_source = [&]() {
    for (;;) {
      std::vector<int> src(static_cast<std::size_t>(len_dist(rng)));
      for (int& t : src) t = tok_dist(rng);
      if (used.insert(src).second) return src;
    }
  };
  auto draw = [&](std::size_t n, auto&& target_of) {
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Sample s;
      s.src = fresh_source();
      s.tgt = target_of(s.src);
      out.push_back(std::move(s));
    }
    return out;
  };
  auto in_domain = [&](const std::vector<int>& src) { return task_target(spec.kind, src, data.permutation); };
  auto ood = [&](const std::vector<int>& src) { return task_target(spec.kind, src, data.ood_permutation); };

  const auto n_eval = static_cast<std::size_t>(spec.n_eval);
  data.in_domain_eval = draw(n_eval, in_domain);
  data.ood_eval = draw(n_eval, ood);

  std::bernoulli_distribution shifted(spec.pretrain_shift_fraction);
  data.pretrain = draw(static_cast<std::size_t>(spec.n_pretrain), [&](const std::vector<int>& src) {
    return shifted(rng) ? in_domain(src) : src;
  });

  std::vector<Sample> pool = draw(static_cast<std::size_t>(spec.n_adapt_large), in_domain);
  pool.resize(static_cast<std::size_t>(spec.adapt_size(size)));
  data.adapt_train = std::move(pool);
  return data;
}

}  // namespace peftlab
