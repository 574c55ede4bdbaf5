// peftlab: pretrain, adapt, merge, report, params, ablate.

#include <iostream>

#include <CLI11.hpp>

#include "peftlab/commands.hpp"

namespace pl = peftlab;

int main(int argc, char** argv) {
  CLI::App app{"Parameter-efficient fine-tuning on a toy encoder-decoder transformer"};
  app.require_subcommand(1);
  int rc = pl::exit_code::kOk;

  pl::PretrainArgs pre;
  auto* pretrain = app.add_subcommand("pretrain", "Train the base model on the pretraining split");
  pretrain->add_option("--config", pre.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  pretrain->add_option("--out", pre.out, "Output checkpoint")->required();
  pretrain->add_option("--seed", pre.seed, "Model initialisation and data-order seed");
  pretrain->callback([&] { rc = pl::cmd_pretrain(pre, std::cout, std::cerr); });

  pl::AdaptArgs ad;
  auto* adapt = app.add_subcommand("adapt", "Attach an adapter to a base checkpoint and train it");
  adapt->add_option("--base", ad.base, "Base model checkpoint")->required();
  adapt->add_option("--config", ad.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  adapt->add_option("--method", ad.method, "lora, alpha_lora, adalora, s2lora, bitfit, ia3, glora, full_ft");
  adapt->add_option("--rank", ad.rank, "Adapter rank (target rank for adalora)");
  adapt->add_option("--alpha1", ad.alpha1, "L1 weight on s2lora coefficients");
  adapt->add_option("--alpha2", ad.alpha2, "L2 weight on s2lora shared bases");
  adapt->add_option("--data-size", ad.data_size, "small, medium or large");
  adapt->add_option("--seed", ad.seed, "Adapter initialisation and data-order seed");
  adapt->add_option("--out", ad.out, "Output adapter checkpoint")->required();
  adapt->callback([&] { rc = pl::cmd_adapt(ad, std::cout, std::cerr); });

  pl::MergeArgs mg;
  auto* merge = app.add_subcommand("merge", "Fold a trained adapter into its base model");
  merge->add_option("--base", mg.base, "Base model checkpoint")->required();
  merge->add_option("--adapter", mg.adapter, "Adapter checkpoint")->required();
  merge->add_option("--out", mg.out, "Output merged checkpoint")->required();
  merge->callback([&] { rc = pl::cmd_merge(mg, std::cout, std::cerr); });

  pl::ReportArgs rp;
  auto* report = app.add_subcommand("report", "Write the per-layer rank allocation of an adalora or s2lora adapter");
  report->add_option("--adapter", rp.adapter, "Adapter checkpoint")->required();
  report->add_option("--threshold", rp.threshold, "Magnitude below which a rank counts as masked")
      ->capture_default_str();
  report->add_option("--out", rp.out, "Output CSV")->required();
  report->add_option("--svg", rp.svg, "Optional grayscale SVG heatmap");
  report->callback([&] { rc = pl::cmd_report(rp, std::cout, std::cerr); });

  pl::ParamsArgs pa;
  auto* params = app.add_subcommand("params", "Print the trainable parameter count of a method");
  params->add_option("--arch", pa.arch, "toy-small or whisper-medium-dims")->capture_default_str();
  params->add_option("--method", pa.method, "Adaptation method")->capture_default_str();
  params->add_option("--rank", pa.rank, "Adapter rank (target rank for adalora)");
  params->add_option("--initial-rank", pa.initial_rank, "adalora initial rank");
  params->add_option("--ffm-sharing", pa.ffm_sharing, "s2lora FFM sharing: transpose_tied or per_shape");
  params->add_option("--target-roles", pa.target_roles, "Projection roles to adapt (q k v o fc1 fc2)");
  params->add_flag("-v,--verbose", pa.verbose, "Print census assumptions");
  params->callback([&] { rc = pl::cmd_params(pa, std::cout, std::cerr); });

  pl::AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid and write a summary table");
  ablate->add_option("--base", ab.base, "Base model checkpoint")->required();
  ablate->add_option("--grid", ab.grid, "table1 or table2")->capture_default_str();
  ablate->add_option("--out", ab.out, "Output directory")->required();
  ablate->add_option("--config", ab.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  ablate->add_option("--data-size", ab.data_size, "small, medium or large");
  ablate->callback([&] { rc = pl::cmd_ablate(ab, std::cout, std::cerr); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? pl::exit_code::kOk : pl::exit_code::kInvalid;
  }
  return rc;
}
