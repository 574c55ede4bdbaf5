#include "peftlab/commands.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <system_error>

#include "json_io.hpp"

namespace peftlab {

using detail::Json;
namespace fs = std::filesystem;

namespace {

constexpr std::string_view kModelPrefix = "model/";
constexpr std::string_view kArchEntry = "meta/arch";
constexpr std::size_t kProbeCount = 16;
constexpr std::uint64_t kProbeSeed = 0x5eed;

class UsageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

DType storage_dtype(Precision p) { return p == Precision::f32 ? DType::f32 : DType::f64; }

std::string meta_prefix(Method m) { return "adapter/" + std::string(to_string(m)) + "/_meta/"; }

Tensor vector_tensor(std::span<const double> v) { return Tensor({v.size()}, {v.begin(), v.end()}); }

void require_output_dir(const fs::path& path) {
  const fs::path parent = path.has_parent_path() ? path.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) throw UsageError("output directory does not exist: " + parent.string());
}

fs::path metrics_path(const fs::path& out) {
  fs::path p = out;
  p += ".metrics.json";
  return p;
}

/// Maps exceptions to exit codes, printing the diagnostic.
int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    const StepRecord& s = e.snapshot();
    err << "error: training diverged: " << e.what() << "\n"
        << "  snapshot: step " << s.step << " ce " << s.ce << " l1 " << s.l1 << " l2 " << s.l2 << " orth "
        << s.orth << "\n";
    return exit_code::kDiverged;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kInvalid;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kInvalid;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::kFailure;
  }
}

RunConfig config_or_default(const std::optional<fs::path>& path) {
  return path ? load_run_config(*path) : RunConfig{};
}

TrainConfig with_runtime(TrainConfig t, std::uint64_t seed) {
  t.seed = seed;
  t.precision = precision_from_env();
  return t;
}

Json ter_json(const EvalMetrics& m) { return Json{{"in_domain_ter", m.in_domain_ter}, {"ood_ter", m.ood_ter}}; }

EvalMetrics evaluate_model(const Model& model, const TaskData& data, const ForwardOverrides* ov = nullptr) {
  return {token_error_rate(model, data.in_domain_eval, ov), token_error_rate(model, data.ood_eval, ov)};
}

EvalMetrics evaluate_adapted(const AdaptedModel& am, const TaskData& data) {
  Tape tape(false);
  const ForwardOverrides ov = am.overrides(tape);
  return evaluate_model(am.base(), data, &ov);
}

Json steps_json(const TrainingRun& run) {
  Json steps = Json::array();
  for (const auto& s : run.steps) steps.push_back(detail::to_json(s));
  return steps;
}

struct AdaptOutcome {
  std::unique_ptr<AdaptedModel> model;
  Json metrics;
};

/// Attaches `spec` to a copy of `base`, trains on the adaptation split and
/// evaluates. `on_epoch` sees the adapted model after every epoch.
AdaptOutcome adapt_once(const Model& base, const RunConfig& cfg, const AdapterSpec& spec, const TaskData& data,
                        const std::function<void(const AdaptedModel&)>& on_epoch = {}) {
  AdaptOutcome res;
  res.model = std::make_unique<AdaptedModel>(attach(base.clone(), spec, cfg.seed + 1));
  AdaptedModel& am = *res.model;
  const TrainConfig tcfg = with_runtime(cfg.train, cfg.seed);
  const EvalMetrics zero_shot = evaluate_model(base, data);
  TrainHooks hooks;
  if (on_epoch) hooks.on_epoch_end = [&](int) { on_epoch(am); };
  const TrainingRun run = run_training(am, tcfg, data.adapt_train, hooks);
  const EvalMetrics final = evaluate_adapted(am, data);

  Json m;
  m["method"] = std::string(to_string(spec.method));
  m["rank"] = spec.method == Method::adalora ? spec.target_rank : spec.rank;
  m["alpha1"] = spec.alpha1;
  m["alpha2"] = spec.alpha2;
  m["adapter"] = detail::to_json(spec);
  m["config"] = detail::to_json(cfg);
  m["precision"] = tcfg.precision == Precision::f32 ? "f32" : "f64";
  m["learning_rate"] = tcfg.lr_for(spec.method);
  m["data_size"] = std::string(to_string(cfg.data_size));
  m["n_train"] = data.adapt_train.size();
  m["trainable_params"] = am.adapter().trainable_count();
  m["total_steps"] = run.total_steps;
  m["steps"] = steps_json(run);
  m["zero_shot"] = ter_json(zero_shot);
  m["final"] = ter_json(final);
  if (!run.steps.empty()) m["final_loss"] = detail::to_json(run.steps.back());
  if (spec.method == Method::adalora || spec.method == Method::s2lora) {
    Json reports = Json::array();
    for (const auto& r : run.epoch_rank_reports) reports.push_back(detail::to_json(r));
    m["rank_reports"] = reports;
  }
  if (spec.method == Method::adalora) {
    Json alloc{{"enabled", spec.alloc_on}, {"soft_masking", true}, {"reallocations", run.reallocations.size()},
               {"skipped_tracker_steps", run.skipped_tracker_steps}};
    if (run.schedule) {
      alloc["b_init"] = run.schedule->b_init;
      alloc["b_target"] = run.schedule->b_target;
      alloc["t_warmup"] = run.schedule->t_warmup;
      alloc["t_final"] = run.schedule->t_final;
    }
    alloc["final_active_rank"] = dynamic_cast<const AdaLoRAAdapter&>(am.adapter()).total_active_rank();
    m["allocation"] = alloc;
  }
  res.metrics = std::move(m);
  return res;
}

AdapterSpec apply_overrides(const RunConfig& cfg, const AdaptArgs& args) {
  AdapterSpec spec = cfg.adapter;
  if (args.method || args.rank) {
    const Method method = args.method ? parse_method(*args.method) : cfg.adapter.method;
    const int rank = args.rank ? *args.rank : (cfg.adapter.method == Method::adalora ? cfg.adapter.target_rank
                                                                                   : cfg.adapter.rank);
    spec = AdapterSpec::for_method(method, rank);
    spec.target_roles = cfg.adapter.target_roles;
    spec.alpha1 = cfg.adapter.alpha1;
    spec.alpha2 = cfg.adapter.alpha2;
    spec.epsilon_nominal = cfg.adapter.epsilon_nominal;
    spec.orth_on = cfg.adapter.orth_on;
    spec.alloc_on = cfg.adapter.alloc_on;
    spec.ffm_sharing = cfg.adapter.ffm_sharing;
    spec.glora_families = cfg.adapter.glora_families;
  }
  if (args.alpha1) spec.alpha1 = *args.alpha1;
  if (args.alpha2) spec.alpha2 = *args.alpha2;
  return spec;
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoint layouts

Checkpoint model_checkpoint(const Model& model, DType dtype) {
  Checkpoint ck;
  ck.add(std::string(kArchEntry), vector_tensor(model.arch().to_vector()), DType::f64);
  for (const auto& p : model.parameters()) ck.add(std::string(kModelPrefix) + p.name, p.tensor, dtype);
  return ck;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const ArchSpec arch = ArchSpec::from_vector(ckpt.at(kArchEntry).values);
  Model model = build_model(arch, 0);
  for (auto& p : model.parameters()) {
    const ArrayEntry& e = ckpt.at(std::string(kModelPrefix) + p.name);
    if (e.values.size() != p.tensor.size()) throw CheckpointError("checkpoint: shape mismatch for " + p.name);
    std::copy(e.values.begin(), e.values.end(), p.tensor.data().begin());
  }
  return model;
}

Checkpoint adapter_checkpoint(const Adapter& adapter, DType dtype) {
  Checkpoint ck;
  for (const auto& nt : adapter.state()) ck.add(nt.name, nt.tensor, dtype);
  const std::string meta = meta_prefix(adapter.method());
  const std::uint64_t h = adapter.arch().hash();
  ck.add(meta + "arch", vector_tensor(adapter.arch().to_vector()), DType::f64);
  ck.add(meta + "arch_hash",
         vector_tensor(std::vector<double>{static_cast<double>(h >> 32), static_cast<double>(h & 0xFFFFFFFFULL)}),
         DType::f64);
  ck.add(meta + "spec", vector_tensor(adapter.spec().to_vector()), DType::f64);
  return ck;
}

AdapterRecord read_adapter_checkpoint(const Checkpoint& ckpt) {
  const ArrayEntry* spec_entry = nullptr;
  for (const auto& e : ckpt.entries()) {
    if (e.name.starts_with("adapter/") && e.name.ends_with("/_meta/spec")) spec_entry = &e;
  }
  if (!spec_entry) throw CheckpointError("checkpoint: not an adapter checkpoint (no adapter/<method>/_meta/spec)");
  AdapterRecord rec;
  rec.spec = AdapterSpec::from_vector(spec_entry->values);
  const std::string meta = meta_prefix(rec.spec.method);
  rec.arch = ArchSpec::from_vector(ckpt.at(meta + "arch").values);
  const auto& hv = ckpt.at(meta + "arch_hash").values;
  if (hv.size() != 2) throw CheckpointError("checkpoint: malformed arch hash");
  rec.arch_hash = (static_cast<std::uint64_t>(hv[0]) << 32) | static_cast<std::uint64_t>(hv[1]);
  if (rec.arch_hash != rec.arch.hash()) throw CheckpointError("checkpoint: recorded arch hash does not match arch");
  const std::string prefix = "adapter/" + std::string(to_string(rec.spec.method)) + "/";
  for (const auto& e : ckpt.entries()) {
    if (!e.name.starts_with(prefix)) throw CheckpointError("checkpoint: foreign array " + e.name);
    if (e.name.starts_with(meta)) continue;
    rec.arrays.push_back({e.name, e.to_tensor()});
  }
  return rec;
}

std::unique_ptr<Adapter> restore_adapter(const AdapterRecord& record) {
  auto adapter = make_adapter(record.spec, record.arch, 0);
  adapter->load_state(record.arrays);
  return adapter;
}

std::vector<Sample> probe_batch(const ArchSpec& arch, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int hi = arch.vocab_size - 1;
  std::uniform_int_distribution<int> tok(tokens::kFirstPayload, std::max(tokens::kFirstPayload, hi));
  std::uniform_int_distribution<int> len(1, std::min({16, arch.max_src_len, arch.max_tgt_len - 1}));
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    s.src.resize(static_cast<std::size_t>(len(rng)));
    for (int& t : s.src) t = tok(rng);
    s.tgt.resize(static_cast<std::size_t>(len(rng)));
    s.tgt[0] = tokens::kBos;
    for (std::size_t j = 1; j < s.tgt.size(); ++j) s.tgt[j] = tok(rng);
    out.push_back(std::move(s));
  }
  return out;
}

double max_logit_deviation(const AdaptedModel& adapted, const Model& merged, std::span<const Sample> probes) {
  double worst = 0.0;
  Tape tape(false);
  const ForwardOverrides ov = adapted.overrides(tape);
  for (const Sample& s : probes) {
    const Tensor a = forward(tape, adapted.base(), s.src, s.tgt, &ov);
    const Tensor b = forward(tape, merged, s.src, s.tgt);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// pretrain

int cmd_pretrain(const PretrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = config_or_default(args.config);
    if (args.seed) cfg.seed = *args.seed;
    require_output_dir(args.out);
    const TaskData data = make_task(cfg.task, cfg.task_seed, cfg.data_size);
    const TrainConfig tcfg = with_runtime(cfg.pretrain, cfg.seed);
    AdapterSpec full = AdapterSpec::for_method(Method::full_ft);
    AdaptedModel am = attach(build_model(cfg.arch, cfg.seed), full, cfg.seed);
    const TrainingRun run = run_training(am, tcfg, data.pretrain);
    Model model = am.merge();
    const EvalMetrics eval = evaluate_model(model, data);
    std::vector<Sample> copy_set;
    for (const Sample& s : data.in_domain_eval) copy_set.push_back({s.src, s.src});
    const double copy_ter = token_error_rate(model, copy_set);

    Json m;
    m["command"] = "pretrain";
    m["config"] = detail::to_json(cfg);
    m["precision"] = tcfg.precision == Precision::f32 ? "f32" : "f64";
    m["parameters"] = model.parameter_count();
    m["n_train"] = data.pretrain.size();
    m["total_steps"] = run.total_steps;
    m["steps"] = steps_json(run);
    m["final"] = ter_json(eval);
    m["final"]["copy_ter"] = copy_ter;
    if (!run.steps.empty()) m["final_loss"] = detail::to_json(run.steps.back());

    model_checkpoint(model, storage_dtype(tcfg.precision)).save(args.out);
    write_file_atomic(metrics_path(args.out), detail::dump(m));
    out << "pretrained " << model.parameter_count() << " parameters in " << run.total_steps << " steps ("
        << run.wall_seconds << " s)\n"
        << "copy TER " << copy_ter << ", in-domain TER " << eval.in_domain_ter << ", OOD TER " << eval.ood_ter
        << "\n"
        << "wrote " << args.out.string() << "\n";
    return exit_code::kOk;
  });
}

// ---------------------------------------------------------------------------
// adapt

int cmd_adapt(const AdaptArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = config_or_default(args.config);
    if (args.seed) cfg.seed = *args.seed;
    if (args.data_size) cfg.data_size = parse_data_size(*args.data_size);
    const AdapterSpec spec = apply_overrides(cfg, args);
    require_output_dir(args.out);
    const Model base = model_from_checkpoint(Checkpoint::load(args.base));
    cfg.arch = base.arch();
    cfg.adapter = spec;
    cfg.validate();
    const TaskData data = make_task(cfg.task, cfg.task_seed, cfg.data_size);
    const DType dtype = storage_dtype(precision_from_env());

    AdaptOutcome res = adapt_once(base, cfg, spec, data, [&](const AdaptedModel& am) {
      adapter_checkpoint(am.adapter(), dtype).save(args.out);
    });
    res.metrics["command"] = "adapt";
    adapter_checkpoint(res.model->adapter(), dtype).save(args.out);
    write_file_atomic(metrics_path(args.out), detail::dump(res.metrics));
    const Json& f = res.metrics["final"];
    const Json& z = res.metrics["zero_shot"];
    out << to_string(spec.method) << ": in-domain TER " << z["in_domain_ter"].get<double>() << " -> "
        << f["in_domain_ter"].get<double>() << ", OOD TER " << z["ood_ter"].get<double>() << " -> "
        << f["ood_ter"].get<double>() << "\n"
        << "wrote " << args.out.string() << "\n";
    return exit_code::kOk;
  });
}

// ---------------------------------------------------------------------------
// merge

int cmd_merge(const MergeArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    require_output_dir(args.out);
    Model base = model_from_checkpoint(Checkpoint::load(args.base));
    const AdapterRecord rec = read_adapter_checkpoint(Checkpoint::load(args.adapter));
    if (!(rec.arch == base.arch()) || rec.arch_hash != base.arch().hash()) {
      throw UsageError("adapter was trained for arch '" + rec.arch.name + "' which does not match the base model");
    }
    AdaptedModel am = attach(std::move(base), rec.spec, 0);
    am.adapter().load_state(rec.arrays);
    const Model merged = am.merge();
    const double dev = max_logit_deviation(am, merged, probe_batch(merged.arch(), kProbeCount, kProbeSeed));
    model_checkpoint(merged, storage_dtype(precision_from_env())).save(args.out);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", dev);
    out << "max forward deviation: " << buf << "\n"
        << "wrote " << args.out.string() << "\n";
    return exit_code::kOk;
  });
}

// ---------------------------------------------------------------------------
// report

int cmd_report(const ReportArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    require_output_dir(args.out);
    if (args.svg) require_output_dir(*args.svg);
    const AdapterRecord rec = read_adapter_checkpoint(Checkpoint::load(args.adapter));
    if (rec.spec.method != Method::adalora && rec.spec.method != Method::s2lora) {
      throw UsageError("rank report needs an adalora or s2lora adapter, got " +
                       std::string(to_string(rec.spec.method)));
    }
    const auto adapter = restore_adapter(rec);
    const RankReport report = rank_report(*adapter, args.threshold);
    std::ostringstream csv;
    write_rank_csv(csv, report);
    std::string svg_text;
    if (args.svg) {
      std::ostringstream svg;
      write_rank_svg(svg, report);
      svg_text = svg.str();
    }
    write_file_atomic(args.out, csv.str());
    if (args.svg) write_file_atomic(*args.svg, svg_text);
    out << "total allocated rank " << report.total() << " (threshold " << args.threshold << ")\n"
        << "wrote " << args.out.string() << "\n";
    return exit_code::kOk;
  });
}

// ---------------------------------------------------------------------------
// params

std::string format_count(const TrainableCount& count) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%zu (%.2f%%)", count.count, count.fraction * 100.0);
  return buf;
}

int cmd_params(const ParamsArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ArchSpec arch = ArchSpec::preset(args.arch);
    AdapterSpec spec = AdapterSpec::for_method(parse_method(args.method), args.rank.value_or(8));
    if (args.initial_rank) spec.initial_rank = *args.initial_rank;
    if (args.ffm_sharing) spec.ffm_sharing = parse_ffm_sharing(*args.ffm_sharing);
    if (args.target_roles) {
      RoleSet roles;
      for (const auto& r : *args.target_roles) roles.insert(parse_role(r));
      spec.target_roles = roles;
    }
    const TrainableCount c = count_trainable(spec, arch);
    out << format_count(c) << "\n";
    if (args.verbose) {
      out << "base parameters: " << base_parameter_count(arch) << "\n";
      if (!spec.roles().empty()) {
        out << "adapted sites: " << enumerate_sites(make_sites(arch), spec.roles()).size() << "\n";
      }
      if (arch.frontend_mels > 0) {
        out << "front-end stub: two convolutions (" << arch.frontend_mels << " -> d, d -> d, kernel 3) with biases,"
            << " replacing the encoder token embedding; sinusoidal encoder positions are not parameters\n";
      }
      switch (spec.method) {
        case Method::bitfit:
          out << "bias census: q, v, o, fc1, fc2 projections (k has no bias), every layer-norm bias,"
              << " front-end stub biases\n";
          break;
        case Method::glora:
          out << "glora: A = W-side d1 x r . r x d1, B = d2 x r . r x d1, C (d1), D (scalar), E (d2);"
              << " C, D, E only on biased sites\n";
          break;
        case Method::s2lora:
          out << "shared pairs: " << [&] {
            SharedBasisStore probe(spec.ffm_sharing);
            std::set<std::string> ids;
            for (const auto& s : enumerate_sites(make_sites(arch), spec.roles())) {
              ids.insert(probe.resolve(s.group, s.role, s.out_dim, s.in_dim).key.id());
            }
            std::string list;
            for (const auto& id : ids) list += (list.empty() ? "" : ", ") + id;
            return list;
          }() << "\n";
          break;
        default:
          break;
      }
    }
    return exit_code::kOk;
  });
}

// ---------------------------------------------------------------------------
// ablate

std::vector<GridCell> ablation_grid(std::string_view grid) {
  std::vector<GridCell> cells;
  if (grid == "table1") {
    for (int r : {1, 8, 32}) {
      cells.push_back({"lora", AdapterSpec::for_method(Method::lora, r)});
      cells.push_back({"adalora", AdapterSpec::for_method(Method::adalora, r)});
      AdapterSpec no_orth = AdapterSpec::for_method(Method::adalora, r);
      no_orth.orth_on = false;
      cells.push_back({"adalora_wo_orth", no_orth});
      AdapterSpec no_alloc = AdapterSpec::for_method(Method::adalora, r);
      no_alloc.alloc_on = false;
      cells.push_back({"adalora_wo_alloc", no_alloc});
      AdapterSpec neither = no_alloc;
      neither.orth_on = false;
      cells.push_back({"adalora_wo_both", neither});
      cells.push_back({"alpha_lora", AdapterSpec::for_method(Method::alpha_lora, r)});
    }
  } else if (grid == "table2") {
    for (Method m : {Method::full_ft, Method::glora, Method::adalora, Method::lora, Method::bitfit, Method::ia3,
                     Method::alpha_lora, Method::s2lora}) {
      cells.push_back({std::string(to_string(m)), AdapterSpec::for_method(m, 8)});
    }
  } else {
    throw ValidationError("unknown grid '" + std::string(grid) + "'; valid grids: table1, table2");
  }
  return cells;
}

int cmd_ablate(const AblateArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = config_or_default(args.config);
    if (args.data_size) cfg.data_size = parse_data_size(*args.data_size);
    const std::vector<GridCell> cells = ablation_grid(args.grid);
    const Model base = model_from_checkpoint(Checkpoint::load(args.base));
    cfg.arch = base.arch();
    for (const auto& c : cells) c.spec.validate(cfg.arch);
    cfg.validate();
    fs::create_directories(args.out);
    const TaskData data = make_task(cfg.task, cfg.task_seed, cfg.data_size);

    struct Result {
      bool ok = false;
      double in_domain = 0.0;
      double ood = 0.0;
      std::size_t params = 0;
    };
    std::vector<Result> results(cells.size());
    int failures = 0;
    bool diverged = false;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const GridCell& cell = cells[i];
      const int r = cell.spec.method == Method::adalora ? cell.spec.target_rank : cell.spec.rank;
      const std::string id = cell.row + "_r" + std::to_string(r);
      try {
        RunConfig cell_cfg = cfg;
        cell_cfg.adapter = cell.spec;
        AdaptOutcome res = adapt_once(base, cell_cfg, cell.spec, data);
        res.metrics["command"] = "ablate";
        res.metrics["grid"] = args.grid;
        res.metrics["cell"] = id;
        write_file_atomic(args.out / (id + ".json"), detail::dump(res.metrics));
        results[i] = {true, res.metrics["final"]["in_domain_ter"].get<double>(),
                      res.metrics["final"]["ood_ter"].get<double>(), res.model->adapter().trainable_count()};
        out << id << ": in-domain TER " << results[i].in_domain << "\n";
      } catch (const DivergenceError& e) {
        ++failures;
        diverged = true;
        err << "cell " << id << " diverged: " << e.what() << "\n";
      } catch (const std::exception& e) {
        ++failures;
        err << "cell " << id << " failed: " << e.what() << "\n";
      }
    }

    auto fmt = [](const Result& res, double v) {
      if (!res.ok) return std::string("NA");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", v);
      return std::string(buf);
    };
    std::ostringstream csv;
    if (args.grid == "table1") {
      csv << "method,r=1,r=8,r=32\r\n";
      const std::size_t per_rank = cells.size() / 3;
      for (std::size_t row = 0; row < per_rank; ++row) {
        csv << cells[row].row;
        for (std::size_t k = 0; k < 3; ++k) {
          const Result& res = results[k * per_rank + row];
          csv << ',' << fmt(res, res.in_domain);
        }
        csv << "\r\n";
      }
    } else {
      csv << "method,trainable_params,in_domain_ter,ood_ter\r\n";
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const TrainableCount c = count_trainable(cells[i].spec, cfg.arch);
        char frac[32];
        std::snprintf(frac, sizeof frac, "%.2f%%", c.fraction * 100.0);
        csv << cells[i].row << ',' << frac << ',' << fmt(results[i], results[i].in_domain) << ','
            << fmt(results[i], results[i].ood) << "\r\n";
      }
    }
    write_file_atomic(args.out / "summary.csv", csv.str());
    out << "wrote " << (args.out / "summary.csv").string() << " (" << cells.size() - failures << "/" << cells.size()
        << " cells)\n";
    if (failures > 0) return diverged ? exit_code::kDiverged : exit_code::kFailure;
    return exit_code::kOk;
  });
}

}  // namespace peftlab
