#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "peftlab/rank_allocator.hpp"
#include "test_util.hpp"

using namespace peftlab;

namespace {

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find("\r\n", pos);
    out.push_back(text.substr(pos, end - pos));
    pos = end + 2;
  }
  return out;
}

// Random EMA state for every tracked slot of an AdaLoRA adapter.
ImportanceTracker random_tracker(const AdaLoRAAdapter& ad, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> ibar, ubar;
  for (const Tensor& t : adalora_tracked_tensors(ad)) {
    std::vector<double> i(t.size()), v(t.size());
    for (auto& x : i) x = u(rng);
    for (auto& x : v) x = u(rng);
    ibar.push_back(std::move(i));
    ubar.push_back(std::move(v));
  }
  ImportanceTracker tr;
  tr.set_state(std::move(ibar), std::move(ubar));
  return tr;
}

}  // namespace

TEST(Tracker, RawSensitivityIsAbsProduct) {
  const std::vector<double> theta{2.0}, grad{0.5};
  const std::vector<std::span<const double>> v{theta}, g{grad};
  // Fresh EMA: ibar = (1 - beta1) * raw, so raw = ibar / (1 - beta1).
  ImportanceTracker half(0.5, 0.5);
  ASSERT_TRUE(half.update(v, g));
  EXPECT_DOUBLE_EQ(half.ibar(0)[0] / 0.5, 1.0);
  EXPECT_THROW(ImportanceTracker(0.0, 0.5), ValidationError);
  ImportanceTracker tr;
  ASSERT_TRUE(tr.update(v, g));
  EXPECT_DOUBLE_EQ(tr.ibar(0)[0], 0.15 * 1.0);
}

TEST(Tracker, ConstantSensitivityConvergesGeometrically) {
  const double c = 0.6;
  const std::vector<double> theta{1.0, 3.0}, grad{c, c / 3.0};
  const std::vector<std::span<const double>> v{theta}, g{grad};
  ImportanceTracker tr(0.85, 0.85);
  for (int t = 0; t < 200; ++t) tr.update(v, g);
  for (std::size_t i = 0; i < 2; ++i) {
    // Oracle: ibar_t = c (1 - 0.85^t)
    EXPECT_NEAR(tr.ibar(0)[i], c * (1.0 - std::pow(0.85, 200)), 1e-15);
    EXPECT_LT(std::abs(tr.ibar(0)[i] - c), 1e-10);
    EXPECT_LT(tr.ubar(0)[i], 1e-10);
  }
}

TEST(Tracker, ZeroGradientDecays) {
  const std::vector<double> theta{1.0}, one{1.0}, zero{0.0};
  ImportanceTracker tr;
  tr.update(std::vector<std::span<const double>>{theta}, std::vector<std::span<const double>>{one});
  const double start = tr.ibar(0)[0];
  for (int t = 1; t <= 50; ++t) {
    tr.update(std::vector<std::span<const double>>{theta}, std::vector<std::span<const double>>{zero});
    EXPECT_NEAR(tr.ibar(0)[0], start * std::pow(0.85, t), 1e-15);
  }
}

TEST(Tracker, NonFiniteGradientIsSkipped) {
  const std::vector<double> theta{1.0}, good{1.0}, bad{std::nan("")};
  ImportanceTracker tr;
  tr.update(std::vector<std::span<const double>>{theta}, std::vector<std::span<const double>>{good});
  const double before = tr.ibar(0)[0];
  EXPECT_FALSE(tr.update(std::vector<std::span<const double>>{theta}, std::vector<std::span<const double>>{bad}));
  EXPECT_EQ(tr.ibar(0)[0], before);
  EXPECT_EQ(tr.skipped_steps(), 1u);
  EXPECT_EQ(tr.steps(), 1u);
}

TEST(Triplet, Additivity) {
  // One site, rank 2, B is 3x2, A is 2x4.
  ImportanceTracker tr;
  tr.set_state({std::vector<double>(6, 0.0), {0.0, 0.0}, std::vector<double>(8, 0.0)},
               {std::vector<double>(6, 0.0), {0.0, 0.0}, std::vector<double>(8, 0.0)});
  EXPECT_EQ(triplet_importance(tr, 0, 0, 2, 3, 4), 0.0);
  tr.set_state({std::vector<double>(6, 0.0), {0.0, 0.7}, std::vector<double>(8, 0.0)},
               {std::vector<double>(6, 0.0), {0.0, 1.0}, std::vector<double>(8, 0.0)});
  EXPECT_DOUBLE_EQ(triplet_importance(tr, 0, 1, 2, 3, 4), 0.7);
  EXPECT_EQ(triplet_importance(tr, 0, 0, 2, 3, 4), 0.0);
}

TEST(Triplet, MatchesBruteForceRecomputation) {
  const AdaLoRAAdapter ad(AdapterSpec::for_method(Method::adalora, 8), ArchSpec::toy_small(), 1);
  const ImportanceTracker tr = random_tracker(ad, 3);
  for (std::size_t s = 0; s < ad.states().size(); s += 5) {
    const auto& st = ad.states()[s];
    const std::size_t r = st.lambda.size(), rows = st.B.rows(), cols = st.A.cols();
    for (std::size_t k = 0; k < r; ++k) {
      double b = 0.0, a = 0.0;
      for (std::size_t j = 0; j < rows; ++j) b += tr.ibar(3 * s)[j * r + k] * tr.ubar(3 * s)[j * r + k];
      for (std::size_t j = 0; j < cols; ++j) a += tr.ibar(3 * s + 2)[k * cols + j] * tr.ubar(3 * s + 2)[k * cols + j];
      const double oracle = tr.ibar(3 * s + 1)[k] * tr.ubar(3 * s + 1)[k] + b / rows + a / cols;
      EXPECT_NEAR(triplet_importance(tr, s, k, r, rows, cols), oracle, 1e-14);
    }
  }
}

TEST(Budget, Boundaries) {
  const BudgetSchedule s = BudgetSchedule::standard(1728, 1152, 1000);
  EXPECT_EQ(budget_at(0, s), 1728);
  EXPECT_EQ(budget_at(1000, s), 1152);
  EXPECT_EQ(budget_at(s.t_warmup, s), 1728);
  EXPECT_EQ(budget_at(s.t_final, s), 1152);
  EXPECT_THROW(budget_at(-1, s), std::out_of_range);
}

TEST(Budget, CubicMidpoint) {
  BudgetSchedule s{144 * 12, 1152, 100, 300, 400};
  EXPECT_EQ(budget_at(200, s), 1152 + 576 / 8);
  EXPECT_EQ(budget_at(200, s), 1224);
}

TEST(Budget, MonotoneNonIncreasing) {
  const BudgetSchedule s = BudgetSchedule::standard(96 * 12 / 8, 96, 777);
  long prev = budget_at(0, s);
  for (long t = 1; t <= 777; ++t) {
    const long b = budget_at(t, s);
    EXPECT_LE(b, prev);
    prev = b;
  }
}

TEST(Budget, InvalidScheduleRejected) {
  EXPECT_THROW((BudgetSchedule{10, 20, 1, 5, 10}.validate()), ValidationError);
  EXPECT_THROW((BudgetSchedule{20, 10, 5, 5, 10}.validate()), ValidationError);
}

TEST(SelectTop, Examples) {
  const std::vector<double> s{0.9, 0.1, 0.5};
  EXPECT_EQ(select_top(s, 2), (std::vector<bool>{true, false, true}));
  EXPECT_EQ(select_top(s, 3), (std::vector<bool>{true, true, true}));
  const std::vector<double> ties{0.5, 0.5, 0.5};
  EXPECT_EQ(select_top(ties, 2), (std::vector<bool>{true, true, false}));
}

TEST(SelectTop, FullSortOracle) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(500);
  for (auto& x : s) x = u(rng);
  const auto keep = select_top(s, 200);
  std::vector<double> sorted = s;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double cutoff = sorted[199];
  std::size_t kept = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(keep[i], s[i] >= cutoff) << i;
    kept += keep[i];
  }
  EXPECT_EQ(kept, 200u);
}

TEST(Reallocate, BudgetIdentityAndDominance) {
  AdaLoRAAdapter ad(AdapterSpec::for_method(Method::adalora, 8), ArchSpec::toy_small(), 2);
  const ImportanceTracker tr = random_tracker(ad, 4);
  const std::size_t total = ad.total_triplets();
  EXPECT_EQ(total, 12u * 12);
  for (std::size_t budget : {total, total - 1, std::size_t{100}, std::size_t{96}, std::size_t{1}, std::size_t{0}}) {
    const ReallocationResult r = reallocate(tr, ad, budget);
    EXPECT_EQ(ad.total_active_rank(), budget);
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
      if (r.retained[i]) EXPECT_GE(r.scores[i], r.max_masked);
      else EXPECT_LE(r.scores[i], r.min_retained);
    }
    // Determinism: same state, same masks.
    std::vector<double> masks;
    for (const auto& st : ad.states()) masks.insert(masks.end(), st.mask.data().begin(), st.mask.data().end());
    reallocate(tr, ad, budget);
    std::vector<double> again;
    for (const auto& st : ad.states()) again.insert(again.end(), st.mask.data().begin(), st.mask.data().end());
    EXPECT_EQ(masks, again);
  }
}

TEST(Reallocate, MasksFollowOracleTopK) {
  AdaLoRAAdapter ad(AdapterSpec::for_method(Method::adalora, 8), ArchSpec::toy_small(), 2);
  const ImportanceTracker tr = random_tracker(ad, 5);
  std::vector<double> scores;
  for (std::size_t s = 0; s < ad.states().size(); ++s) {
    const auto& st = ad.states()[s];
    for (std::size_t k = 0; k < st.lambda.size(); ++k)
      scores.push_back(triplet_importance(tr, s, k, st.lambda.size(), st.B.rows(), st.A.cols()));
  }
  reallocate(tr, ad, 96);
  const auto keep = select_top(scores, 96);
  std::size_t idx = 0;
  for (const auto& st : ad.states())
    for (std::size_t k = 0; k < st.lambda.size(); ++k) EXPECT_EQ(st.active(k), keep[idx++]);
}

TEST(Report, FreshS2IsAllZero) {
  const S2LoRAAdapter ad(AdapterSpec::for_method(Method::s2lora, 8), ArchSpec::toy_small(), 1);
  const RankReport r = rank_report(ad);
  EXPECT_EQ(r.total(), 0);
  EXPECT_EQ(r.panels.size(), 5u);
}

TEST(Report, ThresholdCounting) {
  S2LoRAAdapter ad(AdapterSpec::for_method(Method::s2lora, 4), ArchSpec::toy_small(), 1);
  auto& st = ad.states()[0];
  st.s = Tensor({4}, {2e-4, 5e-5, 0.3, 0.0});
  const WeightSite& site = ad.sites()[0];
  const RankReport r = rank_report(ad, 1e-4);
  EXPECT_EQ(r.total(), 2);
  for (const auto& p : r.panels) {
    if (p.group != site.group) continue;
    const auto row = std::find(p.roles.begin(), p.roles.end(), site.role) - p.roles.begin();
    EXPECT_EQ(p.cells[row][site.layer], 2);
  }
  // Threshold zero: every coefficient counts.
  const RankReport all = rank_report(ad, 0.0);
  for (const auto& p : all.panels)
    for (const auto& row : p.cells)
      for (int c : row) EXPECT_EQ(c, 4);
  EXPECT_THROW(rank_report(ad, -1.0), ValidationError);
}

TEST(Report, AdaLoRASumEqualsBudget) {
  AdaLoRAAdapter ad(AdapterSpec::for_method(Method::adalora, 8), ArchSpec::toy_small(), 2);
  reallocate(random_tracker(ad, 6), ad, 96);
  EXPECT_EQ(rank_report(ad).total(), 96);
}

TEST(Report, RejectsMethodsWithoutRank) {
  const LoRAAdapter ad(AdapterSpec::for_method(Method::lora, 8), ArchSpec::toy_small(), 1);
  EXPECT_THROW(rank_report(ad), ValidationError);
}

TEST(Report, CsvShape) {
  const ArchSpec arch = ArchSpec::toy_small();
  S2LoRAAdapter ad(AdapterSpec::for_method(Method::s2lora, 4), arch, 1);
  std::ostringstream csv;
  write_rank_csv(csv, rank_report(ad, 0.0));
  const auto lines = lines_of(csv.str());
  ASSERT_EQ(lines.size(), 5u + 3 * 4 + 2 * 2);
  EXPECT_EQ(lines[0], "Enc-SAM,0,1");
  EXPECT_EQ(lines[1], "W_q,4,4");
  EXPECT_EQ(lines[2], "W_v,4,4");
  EXPECT_EQ(lines[3], "W_k,4,4");
  EXPECT_EQ(lines[4], "W_o,4,4");
  EXPECT_EQ(lines[5], "Enc-FFM,0,1");
  EXPECT_EQ(lines[6], "W_fc1,4,4");
  for (const auto& l : lines) EXPECT_EQ(std::count(l.begin(), l.end(), ','), arch.n_enc_layers);

  std::ostringstream svg;
  write_rank_svg(svg, rank_report(ad, 0.0));
  EXPECT_NE(svg.str().find("<svg"), std::string::npos);
  EXPECT_NE(svg.str().find("</svg>"), std::string::npos);
}
