#include "peftlab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>

namespace peftlab {

Precision precision_from_env() {
  const char* raw = std::getenv("PEFTLAB_PRECISION");
  if (!raw || std::string_view(raw).empty() || std::string_view(raw) == "f64") return Precision::f64;
  if (std::string_view(raw) == "f32") return Precision::f32;
  throw ValidationError("PEFTLAB_PRECISION must be f32 or f64, got '" + std::string(raw) + "'");
}

double TrainConfig::lr_for(Method method) const {
  if (learning_rate) return *learning_rate;
  return method == Method::full_ft ? 1e-4 : 1e-3;
}

void TrainConfig::validate() const {
  if (learning_rate && !(*learning_rate >= 0.0)) throw ValidationError("learning_rate must be non-negative");
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (batch_size < 1) throw ValidationError("batch_size must be at least 1");
  if (grad_accumulation < 1) throw ValidationError("grad_accumulation must be at least 1");
  if (orth_weight < 0.0) throw ValidationError("orth_weight must be non-negative");
  if (weight_decay < 0.0) throw ValidationError("weight_decay must be non-negative");
  if (grad_clip < 0.0) throw ValidationError("grad_clip must be non-negative");
  if (max_steps < 0) throw ValidationError("max_steps must be non-negative");
}

// ---------------------------------------------------------------------------
// Objectives

S2Penalty s2_penalty(Tape& tape, const S2LoRAAdapter& adapter) {
  const AdapterSpec& spec = adapter.spec();
  S2Penalty out;
  const auto& states = adapter.states();
  Tensor l1_sum;
  for (const auto& st : states) {
    const Tensor n = ops::l1_norm(tape, st.s);
    l1_sum = l1_sum.defined() ? ops::add(tape, l1_sum, n) : n;
  }
  out.l1 = ops::scale(tape, l1_sum, spec.alpha1 / static_cast<double>(states.size()));

  const auto r = static_cast<std::size_t>(spec.rank);
  Tensor l2_sum;
  for (const auto& [key, pair] : adapter.store().pairs()) {
    for (std::size_t k = 0; k < r; ++k) {
      const Tensor col = ops::l2_norm(tape, ops::slice_cols(tape, pair.B, k, k + 1));
      const Tensor row = ops::l2_norm(tape, ops::slice_rows(tape, pair.A, k, k + 1));
      const Tensor both = ops::add(tape, col, row);
      l2_sum = l2_sum.defined() ? ops::add(tape, l2_sum, both) : both;
    }
  }
  out.l2 = ops::scale(tape, l2_sum, spec.alpha2 / (2.0 * static_cast<double>(r)));
  return out;
}

Tensor total_loss(Tape& tape, const Tensor& ce, const S2LoRAAdapter& adapter) {
  const S2Penalty p = s2_penalty(tape, adapter);
  return ops::add(tape, ops::add(tape, ce, p.l1), p.l2);
}

Tensor orth_penalty(Tape& tape, const AdaLoRAState& state) {
  const std::size_t r = state.lambda.size();
  const Tensor eye = Tensor::identity(r);
  const Tensor gb = ops::sub(tape, ops::matmul(tape, ops::transpose(tape, state.B), state.B), eye);
  const Tensor ga = ops::sub(tape, ops::matmul(tape, state.A, ops::transpose(tape, state.A)), eye);
  return ops::add(tape, ops::sum(tape, ops::mul(tape, gb, gb)), ops::sum(tape, ops::mul(tape, ga, ga)));
}

Tensor sample_loss(Tape& tape, const Model& model, const Sample& sample, const ForwardOverrides* overrides) {
  std::vector<int> dec_in;
  dec_in.reserve(sample.tgt.size() + 1);
  dec_in.push_back(tokens::kBos);
  dec_in.insert(dec_in.end(), sample.tgt.begin(), sample.tgt.end());
  std::vector<int> labels(sample.tgt.begin(), sample.tgt.end());
  labels.push_back(tokens::kEos);
  const Tensor logits = forward(tape, model, sample.src, dec_in, overrides);
  return ops::cross_entropy(tape, logits, labels);
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (const Tensor& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double update = lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      if (wd_ > 0.0) w[j] -= lr_ * wd_ * w[j];
      w[j] -= update;
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

void clip_gradients(std::span<const Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double f = max_norm / norm;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double& g : p.grad()) g *= f;
  }
}

void round_to_float(std::span<Tensor> params) {
  for (Tensor& p : params) {
    for (double& w : p.data()) w = static_cast<double>(static_cast<float>(w));
  }
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

TrainingRun run_training(AdaptedModel& model, const TrainConfig& tcfg, std::span<const Sample> train,
                         const TrainHooks& hooks) {
  tcfg.validate();
  if (train.empty()) throw ValidationError("training set is empty");
  const auto t0 = std::chrono::steady_clock::now();
  Adapter& adapter = model.adapter();
  const AdapterSpec& spec = adapter.spec();

  std::vector<Tensor> params;
  for (const auto& nt : adapter.trainable()) {
    if (nt.tensor.requires_grad()) params.push_back(nt.tensor);
  }
  Adam opt(params, tcfg.lr_for(spec.method), tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps, tcfg.weight_decay);

  auto* s2 = dynamic_cast<S2LoRAAdapter*>(&adapter);
  auto* ada = dynamic_cast<AdaLoRAAdapter*>(&adapter);
  const bool orth = ada && spec.orth_on && tcfg.orth_weight > 0.0;

  const std::size_t n = train.size();
  const auto eff = static_cast<std::size_t>(tcfg.effective_batch());
  const auto bs = static_cast<std::size_t>(tcfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + eff - 1) / eff);
  long total_steps = steps_per_epoch * tcfg.epochs;
  if (tcfg.max_steps > 0) total_steps = std::min(total_steps, tcfg.max_steps);

  TrainingRun run;
  run.total_steps = total_steps;
  ImportanceTracker tracker;
  std::vector<Tensor> tracked;
  if (ada) {
    tracked = adalora_tracked_tensors(*ada);
    if (spec.alloc_on && total_steps > 0) {
      const auto sites = static_cast<long>(ada->sites().size());
      run.schedule = BudgetSchedule::standard(spec.initial_rank * sites, spec.target_rank * sites, total_steps);
      run.schedule->validate();
    }
  }

  std::mt19937_64 rng(tcfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Model& base = model.base();
  long step = 0;

  for (int epoch = 0; epoch < tcfg.epochs && step < total_steps; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t pos = 0; pos < n && step < total_steps; pos += eff) {
      const std::size_t end = std::min(pos + eff, n);
      const std::size_t micro_count = (end - pos + bs - 1) / bs;
      opt.zero_grad();
      StepRecord rec;
      rec.step = step + 1;
      rec.epoch = epoch;
      for (std::size_t mb = pos; mb < end; mb += bs) {
        const std::size_t mb_end = std::min(mb + bs, end);
        Tape tape;
        const ForwardOverrides ov = model.overrides(tape);
        Tensor ce_sum;
        for (std::size_t i = mb; i < mb_end; ++i) {
          const Tensor l = sample_loss(tape, base, train[order[i]], &ov);
          ce_sum = ce_sum.defined() ? ops::add(tape, ce_sum, l) : l;
        }
        const Tensor ce = ops::scale(tape, ce_sum, 1.0 / static_cast<double>(mb_end - mb));
        Tensor loss = ce;
        double l1 = 0.0, l2 = 0.0, orth_v = 0.0;
        if (s2) {
          const S2Penalty p = s2_penalty(tape, *s2);
          l1 = p.l1.item();
          l2 = p.l2.item();
          loss = ops::add(tape, ops::add(tape, loss, p.l1), p.l2);
        }
        if (orth) {
          Tensor sum;
          for (const auto& st : ada->states()) {
            const Tensor o = orth_penalty(tape, st);
            sum = sum.defined() ? ops::add(tape, sum, o) : o;
          }
          const Tensor weighted = ops::scale(tape, sum, tcfg.orth_weight);
          orth_v = weighted.item();
          loss = ops::add(tape, loss, weighted);
        }
        const double total = loss.item();
        const double inv = 1.0 / static_cast<double>(micro_count);
        rec.ce += ce.item() * inv;
        rec.l1 += l1 * inv;
        rec.l2 += l2 * inv;
        rec.orth += orth_v * inv;
        rec.total += total * inv;
        if (!finite(total)) {
          throw DivergenceError("non-finite loss at step " + std::to_string(rec.step) + " (epoch " +
                                    std::to_string(epoch) + ")",
                                rec);
        }
        const Tensor scaled = ops::scale(tape, loss, inv);
        tape.backward(scaled);
      }
      if (tcfg.grad_clip > 0.0) clip_gradients(params, tcfg.grad_clip);
      opt.step();
      ++step;
      if (tcfg.precision == Precision::f32) round_to_float(params);
      if (ada) {
        if (!tracker.update(tracked)) ++run.skipped_tracker_steps;
        if (run.schedule && step > run.schedule->t_warmup && step <= run.schedule->t_final) {
          const auto budget = static_cast<std::size_t>(budget_at(step, *run.schedule));
          run.reallocations.push_back(reallocate(tracker, *ada, budget));
          if (hooks.on_reallocate) hooks.on_reallocate(run.reallocations.back());
        }
      }
      run.steps.push_back(rec);
    }
    if (s2 || ada) run.epoch_rank_reports.push_back(rank_report(adapter));
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch);
  }
  run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

// ---------------------------------------------------------------------------
// Evaluation

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1);
  std::vector<std::size_t> cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double token_error_rate(const Model& model, std::span<const Sample> set, const ForwardOverrides* overrides) {
  if (set.empty()) throw ValidationError("evaluation set is empty");
  const auto max_len = static_cast<std::size_t>(model.arch().max_tgt_len - 1);
  std::size_t errors = 0;
  std::size_t ref_len = 0;
  for (const Sample& s : set) {
    const std::vector<int> hyp = greedy_decode(model, s.src, max_len, overrides);
    errors += edit_distance(s.tgt, hyp);
    ref_len += s.tgt.size();
  }
  return static_cast<double>(errors) / static_cast<double>(ref_len);
}

double token_error_rate(const AdaptedModel& model, std::span<const Sample> set) {
  Tape tape(false);
  const ForwardOverrides ov = model.overrides(tape);
  return token_error_rate(model.base(), set, &ov);
}

}  // namespace peftlab
