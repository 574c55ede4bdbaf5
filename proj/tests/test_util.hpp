#pragma once

#include <random>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/task.hpp"

namespace peftlab::tu {

/// Small enough for exhaustive finite differences.
inline ArchSpec tiny_arch() {
  ArchSpec a;
  a.name = "custom";
  a.d_model = 8;
  a.n_heads = 2;
  a.d_ffn = 16;
  a.vocab_size = 12;
  a.n_enc_layers = 1;
  a.n_dec_layers = 1;
  a.max_src_len = 8;
  a.max_tgt_len = 8;
  return a;
}

inline std::vector<Sample> random_samples(const ArchSpec& arch, std::size_t count, std::uint64_t seed,
                                          int max_len = 8) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(tokens::kFirstPayload, arch.vocab_size - 1);
  std::uniform_int_distribution<int> len(1, std::min({max_len, arch.max_src_len, arch.max_tgt_len - 1}));
  std::vector<Sample> out(count);
  for (auto& s : out) {
    s.src.resize(static_cast<std::size_t>(len(rng)));
    s.tgt.resize(static_cast<std::size_t>(len(rng)));
    for (int& t : s.src) t = tok(rng);
    for (int& t : s.tgt) t = tok(rng);
  }
  return out;
}

/// Adds N(0, std^2) noise to every element.
inline void jitter(Tensor& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  for (double& v : t.data()) v += n(rng);
}

/// Gives every trainable adapter tensor a random non-degenerate value.
inline void randomize_adapter(Adapter& adapter, std::uint64_t seed, double stddev = 0.1) {
  std::mt19937_64 rng(seed);
  for (auto& nt : adapter.trainable()) {
    Tensor t = nt.tensor;
    jitter(t, stddev, rng);
  }
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace peftlab::tu
