#include "peftlab/rank_allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

namespace peftlab {

ImportanceTracker::ImportanceTracker(double beta1, double beta2) : beta1_(beta1), beta2_(beta2) {
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ValidationError("importance smoothing constants must lie in (0, 1)");
  }
}

bool ImportanceTracker::update(std::span<const std::span<const double>> values,
                               std::span<const std::span<const double>> grads) {
  if (values.size() != grads.size()) throw DimensionError("tracker: values and gradients differ in count");
  if (ibar_.empty()) {
    for (const auto& v : values) {
      ibar_.emplace_back(v.size(), 0.0);
      ubar_.emplace_back(v.size(), 0.0);
    }
  }
  if (values.size() != ibar_.size()) throw DimensionError("tracker: slot count changed between updates");
  for (std::size_t s = 0; s < values.size(); ++s) {
    if (values[s].size() != grads[s].size() || values[s].size() != ibar_[s].size()) {
      throw DimensionError("tracker: slot " + std::to_string(s) + " is not shape-aligned");
    }
    for (double g : grads[s]) {
      if (!std::isfinite(g)) {
        ++skipped_;
        return false;
      }
    }
  }
  for (std::size_t s = 0; s < values.size(); ++s) {
    auto& ib = ibar_[s];
    auto& ub = ubar_[s];
    for (std::size_t i = 0; i < ib.size(); ++i) {
      const double raw = std::abs(values[s][i] * grads[s][i]);
      ib[i] = beta1_ * ib[i] + (1.0 - beta1_) * raw;
      ub[i] = beta2_ * ub[i] + (1.0 - beta2_) * std::abs(raw - ib[i]);
    }
  }
  ++steps_;
  return true;
}

bool ImportanceTracker::update(std::span<const Tensor> tensors) {
  std::vector<std::span<const double>> values;
  std::vector<std::span<const double>> grads;
  for (const Tensor& t : tensors) {
    values.push_back(t.data());
    grads.push_back(t.grad());
  }
  return update(values, grads);
}

void ImportanceTracker::set_state(std::vector<std::vector<double>> ibar, std::vector<std::vector<double>> ubar) {
  if (ibar.size() != ubar.size()) throw DimensionError("tracker: state slot counts differ");
  ibar_ = std::move(ibar);
  ubar_ = std::move(ubar);
}

std::vector<Tensor> adalora_tracked_tensors(const AdaLoRAAdapter& adapter) {
  std::vector<Tensor> out;
  for (const auto& st : adapter.states()) {
    out.push_back(st.B);
    out.push_back(st.lambda);
    out.push_back(st.A);
  }
  return out;
}

double triplet_importance(const ImportanceTracker& tracker, std::size_t site, std::size_t k, std::size_t rank,
                          std::size_t b_rows, std::size_t a_cols) {
  if (k >= rank) throw std::out_of_range("triplet_importance: k beyond the stored rank");
  const std::size_t base = 3 * site;
  double b_sum = 0.0;
  for (std::size_t j = 0; j < b_rows; ++j) b_sum += tracker.importance(base, j * rank + k);
  double a_sum = 0.0;
  for (std::size_t j = 0; j < a_cols; ++j) a_sum += tracker.importance(base + 2, k * a_cols + j);
  return tracker.importance(base + 1, k) + b_sum / static_cast<double>(b_rows) +
         a_sum / static_cast<double>(a_cols);
}

BudgetSchedule BudgetSchedule::standard(long b_init, long b_target, long total_steps) {
  BudgetSchedule s;
  s.b_init = b_init;
  s.b_target = b_target;
  s.total_steps = total_steps;
  s.t_warmup = total_steps / 10;
  s.t_final = std::max(s.t_warmup + 1, (total_steps * 7) / 10);
  return s;
}

void BudgetSchedule::validate() const {
  if (t_final <= t_warmup) throw ValidationError("budget schedule: t_final must exceed t_warmup");
  if (b_target > b_init) throw ValidationError("budget schedule: target budget exceeds the initial budget");
  if (b_target < 0) throw ValidationError("budget schedule: negative target budget");
}

long budget_at(long t, const BudgetSchedule& s) {
  s.validate();
  if (t < 0 || t > std::max(s.total_steps, s.t_final)) {
    throw std::out_of_range("budget_at: step " + std::to_string(t) + " outside the schedule");
  }
  if (t <= s.t_warmup) return s.b_init;
  if (t >= s.t_final) return s.b_target;
  const double progress = static_cast<double>(t - s.t_warmup) / static_cast<double>(s.t_final - s.t_warmup);
  const double remaining = 1.0 - progress;
  return s.b_target + std::lround(static_cast<double>(s.b_init - s.b_target) * remaining * remaining * remaining);
}

std::vector<bool> select_top(std::span<const double> scores, std::size_t budget) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<bool> keep(scores.size(), false);
  for (std::size_t i = 0; i < std::min(budget, order.size()); ++i) keep[order[i]] = true;
  return keep;
}

ReallocationResult reallocate(const ImportanceTracker& tracker, AdaLoRAAdapter& adapter, std::size_t budget) {
  auto& states = adapter.states();
  const auto rank = static_cast<std::size_t>(adapter.spec().initial_rank);
  ReallocationResult res;
  res.budget = budget;
  if (budget > adapter.total_triplets()) throw ValidationError("reallocate: budget exceeds the triplet count");
  const bool tracked = tracker.slots() == 3 * states.size();
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (std::size_t k = 0; k < rank; ++k) {
      res.scores.push_back(tracked ? triplet_importance(tracker, i, k, rank, states[i].B.rows(), states[i].A.cols())
                                   : 0.0);
    }
  }
  res.retained = select_top(res.scores, budget);
  res.min_retained = std::numeric_limits<double>::infinity();
  res.max_masked = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (std::size_t k = 0; k < rank; ++k) {
      const std::size_t idx = i * rank + k;
      states[i].set_active(k, res.retained[idx]);
      if (res.retained[idx]) {
        res.min_retained = std::min(res.min_retained, res.scores[idx]);
      } else {
        res.max_masked = std::max(res.max_masked, res.scores[idx]);
      }
    }
  }
  return res;
}

long RankReport::total() const {
  long n = 0;
  for (const auto& p : panels) {
    for (const auto& row : p.cells) n += std::accumulate(row.begin(), row.end(), 0L);
  }
  return n;
}

namespace {

std::vector<Role> panel_roles(ModuleGroup g) {
  if (is_ffm(g)) return {Role::fc1, Role::fc2};
  return {Role::q, Role::v, Role::k, Role::o};
}

}  // namespace

RankReport rank_report(const Adapter& adapter, double threshold) {
  if (!(threshold >= 0.0)) throw ValidationError("rank report threshold must be non-negative");
  RankReport report;
  report.method = adapter.method();
  report.threshold = threshold;
  const ArchSpec& arch = adapter.arch();
  for (ModuleGroup g : kAllGroups) {
    RankPanel p;
    p.group = g;
    p.roles = panel_roles(g);
    const int layers = is_encoder(g) ? arch.n_enc_layers : arch.n_dec_layers;
    p.cells.assign(p.roles.size(), std::vector<int>(static_cast<std::size_t>(layers), 0));
    report.panels.push_back(std::move(p));
  }
  auto place = [&](const WeightSite& site, int rank) {
    RankPanel& p = report.panels[static_cast<std::size_t>(site.group)];
    const auto row = std::find(p.roles.begin(), p.roles.end(), site.role) - p.roles.begin();
    p.cells[static_cast<std::size_t>(row)][static_cast<std::size_t>(site.layer)] = rank;
  };
  if (const auto* s2 = dynamic_cast<const S2LoRAAdapter*>(&adapter)) {
    report.max_rank = adapter.spec().rank;
    for (std::size_t i = 0; i < s2->sites().size(); ++i) {
      const auto s = s2->states()[i].s.data();
      const auto n = std::count_if(s.begin(), s.end(), [&](double v) { return std::abs(v) >= threshold; });
      place(s2->sites()[i], static_cast<int>(n));
    }
  } else if (const auto* ada = dynamic_cast<const AdaLoRAAdapter*>(&adapter)) {
    report.max_rank = adapter.spec().initial_rank;
    for (std::size_t i = 0; i < ada->sites().size(); ++i) {
      place(ada->sites()[i], static_cast<int>(ada->states()[i].active_rank()));
    }
  } else {
    throw ValidationError("rank report needs an adalora or s2lora adapter, got " +
                          std::string(to_string(adapter.method())));
  }
  return report;
}

void write_rank_csv(std::ostream& out, const RankReport& report) {
  for (const auto& p : report.panels) {
    out << to_string(p.group);
    const std::size_t layers = p.cells.empty() ? 0 : p.cells.front().size();
    for (std::size_t l = 0; l < layers; ++l) out << ',' << l;
    out << "\r\n";
    for (std::size_t r = 0; r < p.roles.size(); ++r) {
      out << "W_" << to_string(p.roles[r]);
      for (int v : p.cells[r]) out << ',' << v;
      out << "\r\n";
    }
  }
}

void write_rank_svg(std::ostream& out, const RankReport& report) {
  constexpr int cell = 24;
  constexpr int label = 72;
  constexpr int gap = 16;
  int width = 0;
  int height = gap;
  for (const auto& p : report.panels) {
    const int layers = p.cells.empty() ? 0 : static_cast<int>(p.cells.front().size());
    width = std::max(width, label + layers * cell + gap);
    height += (static_cast<int>(p.roles.size()) + 1) * cell + gap;
  }
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"monospace\" font-size=\"11\">\n";
  int y = gap;
  const double max_rank = std::max(1, report.max_rank);
  for (const auto& p : report.panels) {
    out << "<text x=\"4\" y=\"" << y + cell - 8 << "\">" << to_string(p.group) << "</text>\n";
    const std::size_t layers = p.cells.empty() ? 0 : p.cells.front().size();
    for (std::size_t l = 0; l < layers; ++l) {
      out << "<text x=\"" << label + static_cast<int>(l) * cell + 8 << "\" y=\"" << y + cell - 8 << "\">" << l
          << "</text>\n";
    }
    y += cell;
    for (std::size_t r = 0; r < p.roles.size(); ++r) {
      out << "<text x=\"4\" y=\"" << y + cell - 8 << "\">W_" << to_string(p.roles[r]) << "</text>\n";
      for (std::size_t l = 0; l < layers; ++l) {
        // Brighter cells hold lower ranks.
        const int shade = static_cast<int>(std::lround(255.0 * (1.0 - p.cells[r][l] / max_rank)));
        out << "<rect x=\"" << label + static_cast<int>(l) * cell << "\" y=\"" << y << "\" width=\"" << cell
            << "\" height=\"" << cell << "\" fill=\"rgb(" << shade << ',' << shade << ',' << shade
            << ")\" stroke=\"#888\"><title>" << p.cells[r][l] << "</title></rect>\n";
      }
      y += cell;
    }
    y += gap;
  }
  out << "</svg>\n";
}

}  // namespace peftlab
