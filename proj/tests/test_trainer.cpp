#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <functional>

#include "peftlab/gradcheck.hpp"
#include "peftlab/trainer.hpp"
#include "test_util.hpp"

using namespace peftlab;
using tu::tiny_arch;

namespace {

std::vector<SharedPair*> pairs_of(S2LoRAAdapter& ad) {
  std::vector<SharedPair*> out;
  for (const auto& entry : ad.store().pairs()) out.push_back(ad.store().find(entry.first));
  return out;
}

// S2 adapter over the two fc1 sites of the tiny arch (one per FFM group).
std::unique_ptr<S2LoRAAdapter> fc1_s2(int rank, double alpha1, double alpha2) {
  AdapterSpec spec = AdapterSpec::for_method(Method::s2lora, rank);
  spec.target_roles = RoleSet{Role::fc1};
  spec.alpha1 = alpha1;
  spec.alpha2 = alpha2;
  auto ad = std::make_unique<S2LoRAAdapter>(spec, tiny_arch(), 1);
  for (SharedPair* pair : pairs_of(*ad)) {
    for (double& v : pair->B.data()) v = 0.0;
    for (double& v : pair->A.data()) v = 0.0;
  }
  return ad;
}

TrainConfig quick_config(std::uint64_t seed = 1) {
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 2;
  t.grad_accumulation = 2;
  t.seed = seed;
  return t;
}

std::vector<Sample> copy_samples(const ArchSpec& arch, std::size_t n, std::uint64_t seed) {
  auto out = tu::random_samples(arch, n, seed, 6);
  for (auto& s : out) s.tgt = s.src;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Objectives

TEST(Objective, NoPenaltyReducesToCrossEntropy) {
  auto ad = fc1_s2(2, 0.0, 0.0);
  std::mt19937_64 rng(1);
  for (auto& st : ad->states()) tu::jitter(st.s, 1.0, rng);
  Tape tape(false);
  EXPECT_EQ(total_loss(tape, Tensor::scalar(1.234), *ad).item(), 1.234);
}

TEST(Objective, L1HandEvaluated) {
  auto ad = fc1_s2(2, 0.05, 0.0);
  ASSERT_EQ(ad->states().size(), 2u);
  ad->states()[0].s = Tensor({2}, {1.0, -1.0});
  ad->states()[1].s = Tensor({2}, {0.0, 0.0});
  Tape tape(false);
  EXPECT_DOUBLE_EQ(total_loss(tape, Tensor::scalar(1.0), *ad).item(), 1.05);
}

TEST(Objective, L2HandEvaluated) {
  auto ad = fc1_s2(1, 0.0, 0.1);
  SharedPair& pair = *pairs_of(*ad).front();
  pair.B[0] = 3.0;  // column norm 3
  pair.A[0] = 4.0;  // row norm 4
  Tape tape(false);
  EXPECT_DOUBLE_EQ(total_loss(tape, Tensor::scalar(0.0), *ad).item(), 0.35);
}

TEST(Objective, OrthPenalty) {
  Tape tape(false);
  AdaLoRAState st{Tensor::identity(3), Tensor::zeros({3}), Tensor::identity(3), Tensor::full({3}, 1.0)};
  EXPECT_EQ(orth_penalty(tape, st).item(), 0.0);
  // One column of norm 2: (4 - 1)^2; A is a unit row, contributing nothing.
  st = {Tensor({2, 1}, {2.0, 0.0}), Tensor::zeros({1}), Tensor({1, 3}, {0.0, 1.0, 0.0}), Tensor::full({1}, 1.0)};
  EXPECT_DOUBLE_EQ(orth_penalty(tape, st).item(), 9.0);
  st.A = Tensor({1, 3}, {0.0, 0.0, 3.0});
  EXPECT_DOUBLE_EQ(orth_penalty(tape, st).item(), 9.0 + 64.0);
}

TEST(Objective, OrthPenaltyGradient) {
  std::mt19937_64 rng(2);
  AdaLoRAState st{Tensor::normal({4, 2}, 0.7, rng, true), Tensor::zeros({2}), Tensor::normal({2, 4}, 0.7, rng, true),
                  Tensor::full({2}, 1.0)};
  std::vector<Tensor> p{st.B, st.A};
  EXPECT_TRUE(finite_diff_check([&](Tape& t) { return orth_penalty(t, st); }, p).passed);
}

TEST(Objective, CompositeGradientAwayFromKinks) {
  auto ad = fc1_s2(2, 0.05, 0.1);
  std::mt19937_64 rng(3);
  for (SharedPair* pair : pairs_of(*ad)) {
    tu::jitter(pair->B, 0.5, rng);
    tu::jitter(pair->A, 0.5, rng);
  }
  for (auto& st : ad->states()) st.s = Tensor({2}, {0.4, -0.3}, true);
  Model base = build_model(tiny_arch(), 4);
  ad->bind(base);
  const Sample s{{3, 4, 5}, {6, 7, 8}};
  std::vector<Tensor> params;
  for (const auto& nt : ad->trainable()) params.push_back(nt.tensor);
  const auto rep = finite_diff_check(
      [&](Tape& t) {
        const ForwardOverrides ov = ad->overrides(t, base);
        return total_loss(t, sample_loss(t, base, s, &ov), *ad);
      },
      params);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Eval, EditDistance) {
  const std::vector<int> abc{1, 2, 3}, axc{1, 9, 3}, ab{1, 2};
  EXPECT_EQ(edit_distance(abc, abc), 0u);
  EXPECT_EQ(edit_distance(abc, axc), 1u);
  EXPECT_EQ(edit_distance(ab, abc), 1u);
  EXPECT_EQ(edit_distance(ab, std::vector<int>{}), 2u);
  EXPECT_EQ(edit_distance(std::vector<int>{}, abc), 3u);
}

TEST(Eval, EditDistanceBruteForceOracle) {
  // Recursive definition on short random strings.
  std::function<std::size_t(std::span<const int>, std::span<const int>)> rec = [&](auto a, auto b) -> std::size_t {
    if (a.empty()) return b.size();
    if (b.empty()) return a.size();
    const std::size_t sub = rec(a.subspan(1), b.subspan(1)) + (a[0] == b[0] ? 0 : 1);
    return std::min({sub, rec(a.subspan(1), b) + 1, rec(a, b.subspan(1)) + 1});
  };
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> a(rng() % 6), b(rng() % 6);
    for (int& x : a) x = static_cast<int>(rng() % 3);
    for (int& x : b) x = static_cast<int>(rng() % 3);
    EXPECT_EQ(edit_distance(a, b), rec(a, b));
  }
}

TEST(Eval, TokenErrorRateExamples) {
  // A model whose every greedy step emits token 7 (final norm outputs a
  // constant that only overlaps token 7's tied embedding row).
  Model m = build_model(ArchSpec::toy_small(), 1);
  const auto& lay = m.layout();
  for (double& g : m.param(lay.dec_final.gain).data()) g = 0.0;
  for (double& b : m.param(lay.dec_final.bias).data()) b = 1.0;
  Tensor& embed = m.param(lay.dec_embed);
  for (double& e : embed.data()) e = 0.0;
  for (std::size_t j = 0; j < embed.cols(); ++j) embed.at(7, j) = 1.0;

  const std::vector<int> sevens(31, 7);
  std::vector<int> one_off = sevens;
  one_off[4] = 8;
  const std::vector<Sample> exact{{{3, 4}, sevens}};
  const std::vector<Sample> sub{{{3, 4}, one_off}};
  const std::vector<Sample> both{{{3, 4}, sevens}, {{5}, one_off}};
  EXPECT_EQ(token_error_rate(m, exact), 0.0);
  EXPECT_DOUBLE_EQ(token_error_rate(m, sub), 1.0 / 31.0);
  EXPECT_DOUBLE_EQ(token_error_rate(m, both), 1.0 / 62.0);
  EXPECT_THROW(token_error_rate(m, std::vector<Sample>{}), ValidationError);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Training, ZeroLearningRateChangesNothing) {
  const Model base = build_model(tiny_arch(), 6);
  const auto data = tu::random_samples(tiny_arch(), 8, 7, 6);
  for (Method m : kAllMethods) {
    AdapterSpec spec = AdapterSpec::for_method(m, 2);
    if (m == Method::adalora) {
      spec.initial_rank = 3;
      spec.target_rank = 2;
    }
    AdaptedModel am = attach(base.clone(), spec, 1);
    tu::randomize_adapter(am.adapter(), 8);
    std::vector<Tensor> before;
    for (const auto& nt : am.trainable()) before.push_back(nt.tensor.clone());
    TrainConfig t = quick_config();
    t.learning_rate = 0.0;
    t.orth_weight = 0.0;
    run_training(am, t, data);
    const auto after = am.trainable();
    for (std::size_t i = 0; i < before.size(); ++i) {
      EXPECT_TRUE(before[i].bitwise_equal(after[i].tensor)) << to_string(m) << " " << after[i].name;
    }
  }
}

TEST(Training, BaseWeightsFrozenUnderPeft) {
  const Model base = build_model(tiny_arch(), 9);
  const auto data = tu::random_samples(tiny_arch(), 8, 10, 6);
  for (Method m : kAllMethods) {
    if (m == Method::full_ft) continue;
    AdapterSpec spec = AdapterSpec::for_method(m, 2);
    if (m == Method::adalora) {
      spec.initial_rank = 3;
      spec.target_rank = 2;
    }
    AdaptedModel am = attach(base.clone(), spec, 1);
    run_training(am, quick_config(), data);
    for (std::size_t i = 0; i < base.parameters().size(); ++i) {
      EXPECT_TRUE(am.base().param(i).bitwise_equal(base.param(i))) << to_string(m);
    }
  }
}

TEST(Training, SameSeedSameLossCurve) {
  const Model base = build_model(tiny_arch(), 11);
  const auto data = tu::random_samples(tiny_arch(), 12, 12, 6);
  auto curve = [&](std::uint64_t seed) {
    AdaptedModel am = attach(base.clone(), AdapterSpec::for_method(Method::s2lora, 2), 3);
    std::vector<double> out;
    for (const auto& r : run_training(am, quick_config(seed), data).steps) out.push_back(r.total);
    return out;
  };
  EXPECT_EQ(curve(4), curve(4));
  EXPECT_NE(curve(4), curve(5));
}

TEST(Training, LoggedComponentsSumToTotal) {
  const Model base = build_model(tiny_arch(), 13);
  const auto data = tu::random_samples(tiny_arch(), 12, 14, 6);
  for (Method m : {Method::s2lora, Method::adalora}) {
    AdapterSpec spec = AdapterSpec::for_method(m, 2);
    spec.initial_rank = 3;
    spec.target_rank = 2;
    AdaptedModel am = attach(base.clone(), spec, 3);
    TrainConfig t = quick_config();
    t.epochs = 2;
    for (const auto& r : run_training(am, t, data).steps) {
      EXPECT_NEAR(r.total, r.ce + r.l1 + r.l2 + r.orth, 1e-12);
      if (m == Method::adalora) {
        EXPECT_GT(r.orth, 0.0);
      }
      if (m == Method::s2lora) {
        EXPECT_GT(r.l2, 0.0);
      }
    }
  }
}

TEST(Training, AdaLoRAEndsAtTargetBudget) {
  const Model base = build_model(tiny_arch(), 15);
  const auto data = tu::random_samples(tiny_arch(), 40, 16, 6);
  AdapterSpec spec = AdapterSpec::for_method(Method::adalora, 2);
  spec.initial_rank = 4;
  spec.target_rank = 2;
  AdaptedModel am = attach(base.clone(), spec, 3);
  TrainConfig t = quick_config();
  t.epochs = 3;
  const TrainingRun run = run_training(am, t, data);
  ASSERT_TRUE(run.schedule.has_value());
  auto& ada = dynamic_cast<AdaLoRAAdapter&>(am.adapter());
  EXPECT_EQ(ada.total_active_rank(), 2 * ada.sites().size());
  for (const auto& r : run.reallocations) {
    std::size_t kept = 0;
    for (bool k : r.retained) kept += k;
    EXPECT_EQ(kept, r.budget);
    EXPECT_GE(r.min_retained, r.max_masked);
  }
  EXPECT_EQ(static_cast<long>(run.reallocations.size()), run.schedule->t_final - run.schedule->t_warmup);
}

TEST(Training, AllocationOffKeepsEveryTriplet) {
  const Model base = build_model(tiny_arch(), 17);
  const auto data = tu::random_samples(tiny_arch(), 20, 18, 6);
  AdapterSpec spec = AdapterSpec::for_method(Method::adalora, 2);
  spec.initial_rank = 4;
  spec.target_rank = 2;
  spec.alloc_on = false;
  AdaptedModel am = attach(base.clone(), spec, 3);
  const TrainingRun run = run_training(am, quick_config(), data);
  EXPECT_TRUE(run.reallocations.empty());
  auto& ada = dynamic_cast<AdaLoRAAdapter&>(am.adapter());
  EXPECT_EQ(ada.total_active_rank(), ada.total_triplets());
}

TEST(Training, MaxStepsAndHooks) {
  const Model base = build_model(tiny_arch(), 19);
  const auto data = tu::random_samples(tiny_arch(), 20, 20, 6);
  AdaptedModel am = attach(base.clone(), AdapterSpec::for_method(Method::lora, 2), 3);
  TrainConfig t = quick_config();
  t.epochs = 3;
  t.max_steps = 7;
  int epochs_seen = 0;
  TrainHooks hooks;
  hooks.on_epoch_end = [&](int) { ++epochs_seen; };
  const TrainingRun run = run_training(am, t, data, hooks);
  EXPECT_EQ(run.steps.size(), 7u);
  EXPECT_EQ(epochs_seen, 2);
}

TEST(Training, DivergenceIsReported) {
  const Model base = build_model(tiny_arch(), 21);
  const auto data = tu::random_samples(tiny_arch(), 16, 22, 6);
  AdaptedModel am = attach(base.clone(), AdapterSpec::for_method(Method::full_ft), 3);
  TrainConfig t = quick_config();
  t.learning_rate = 1e200;
  t.epochs = 4;
  try {
    run_training(am, t, data);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GT(e.snapshot().step, 0);
    EXPECT_FALSE(std::isfinite(e.snapshot().total));
  }
}

TEST(Training, ConfigValidation) {
  TrainConfig t;
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ValidationError);
  t = TrainConfig{};
  t.learning_rate = -1.0;
  EXPECT_THROW(t.validate(), ValidationError);
  EXPECT_EQ(TrainConfig{}.lr_for(Method::lora), 1e-3);
  EXPECT_EQ(TrainConfig{}.lr_for(Method::full_ft), 1e-4);
  EXPECT_EQ(TrainConfig{}.effective_batch(), 16);
}

TEST(Training, GradClipBoundsUpdate) {
  const Model base = build_model(tiny_arch(), 23);
  const auto data = tu::random_samples(tiny_arch(), 4, 24, 6);
  AdaptedModel am = attach(base.clone(), AdapterSpec::for_method(Method::full_ft), 3);
  TrainConfig t = quick_config();
  t.grad_clip = 1e-3;
  t.max_steps = 1;
  EXPECT_NO_THROW(run_training(am, t, data));
}

TEST(Precision, EnvironmentSelection) {
  ::setenv("PEFTLAB_PRECISION", "f32", 1);
  EXPECT_EQ(precision_from_env(), Precision::f32);
  ::setenv("PEFTLAB_PRECISION", "bf16", 1);
  EXPECT_THROW(precision_from_env(), ValidationError);
  ::setenv("PEFTLAB_PRECISION", "f64", 1);
  EXPECT_EQ(precision_from_env(), Precision::f64);
}

TEST(Precision, F32RoundsParameters) {
  const Model base = build_model(tiny_arch(), 25);
  const auto data = tu::random_samples(tiny_arch(), 4, 26, 6);
  AdaptedModel am = attach(base.clone(), AdapterSpec::for_method(Method::lora, 2), 3);
  TrainConfig t = quick_config();
  t.precision = Precision::f32;
  run_training(am, t, data);
  for (const auto& nt : am.trainable())
    for (double v : nt.tensor.data()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // Bias-corrected first step is lr * sign(g) for any non-zero g.
  Tensor p({3}, {1.0, -2.0, 0.5}, true);
  Adam opt({p}, 0.1);
  p.accumulate_grad(std::vector<double>{3.0, -0.01, 0.0});
  opt.step();
  EXPECT_NEAR(p[0], 0.9, 1e-9);
  EXPECT_NEAR(p[1], -1.9, 1e-6);
  EXPECT_EQ(p[2], 0.5);
}

// Pre-registered convergence harness: full fine-tuning learns the copy task.
TEST(Convergence, FullFineTuneLearnsCopy) {
  const ArchSpec arch = ArchSpec::toy_small();
  const auto train = copy_samples(arch, 2048, 30);
  const auto eval = copy_samples(arch, 64, 31);
  AdaptedModel am = attach(build_model(arch, 0), AdapterSpec::for_method(Method::full_ft), 0);
  TrainConfig t;
  t.learning_rate = 2e-3;
  t.epochs = 3;
  t.batch_size = 4;
  t.grad_accumulation = 2;
  run_training(am, t, train);
  EXPECT_LT(token_error_rate(am, eval), 0.05);
}
