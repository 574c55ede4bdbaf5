#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "peftlab/checkpoint.hpp"
#include "peftlab/config.hpp"

namespace peftlab {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kInvalid = 2;
inline constexpr int kDiverged = 3;
}  // namespace exit_code

// ---------------------------------------------------------------------------
// Checkpoint layouts

/// "meta/arch" plus one "model/<parameter>" array per parameter.
Checkpoint model_checkpoint(const Model& model, DType dtype = DType::f64);
Model model_from_checkpoint(const Checkpoint& ckpt);

/// Adapter state plus "adapter/<method>/_meta/{arch,arch_hash,spec}".
Checkpoint adapter_checkpoint(const Adapter& adapter, DType dtype = DType::f64);

struct AdapterRecord {
  AdapterSpec spec;
  ArchSpec arch;
  std::uint64_t arch_hash = 0;
  std::vector<NamedTensor> arrays;  // state arrays, without the _meta entries
};
AdapterRecord read_adapter_checkpoint(const Checkpoint& ckpt);

/// Rebuilds an adapter (unbound) from a record and loads its state.
std::unique_ptr<Adapter> restore_adapter(const AdapterRecord& record);

/// Deterministic probe batch used to compare adapted and merged models.
std::vector<Sample> probe_batch(const ArchSpec& arch, std::size_t count, std::uint64_t seed);
/// Largest absolute logit difference between two forward configurations.
double max_logit_deviation(const AdaptedModel& adapted, const Model& merged, std::span<const Sample> probes);

// ---------------------------------------------------------------------------
// Commands. Each returns a process exit code and never leaves partial output
// files behind.

struct PretrainArgs {
  std::optional<std::filesystem::path> config;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
};
int cmd_pretrain(const PretrainArgs& args, std::ostream& out, std::ostream& err);

struct AdaptArgs {
  std::filesystem::path base;
  std::optional<std::filesystem::path> config;
  std::optional<std::string> method;
  std::optional<int> rank;
  std::optional<double> alpha1;
  std::optional<double> alpha2;
  std::optional<std::string> data_size;
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
};
int cmd_adapt(const AdaptArgs& args, std::ostream& out, std::ostream& err);

struct MergeArgs {
  std::filesystem::path base;
  std::filesystem::path adapter;
  std::filesystem::path out;
};
int cmd_merge(const MergeArgs& args, std::ostream& out, std::ostream& err);

struct ReportArgs {
  std::filesystem::path adapter;
  double threshold = 1e-4;
  std::filesystem::path out;
  std::optional<std::filesystem::path> svg;
};
int cmd_report(const ReportArgs& args, std::ostream& out, std::ostream& err);

struct ParamsArgs {
  std::string arch = "toy-small";
  std::string method = "lora";
  std::optional<int> rank;
  std::optional<int> initial_rank;
  std::optional<std::string> ffm_sharing;
  std::optional<std::vector<std::string>> target_roles;
  bool verbose = false;
};
int cmd_params(const ParamsArgs& args, std::ostream& out, std::ostream& err);
/// "2359296 (0.31%)".
std::string format_count(const TrainableCount& count);

struct AblateArgs {
  std::filesystem::path base;
  std::string grid = "table1";
  std::filesystem::path out;
  std::optional<std::filesystem::path> config;
  std::optional<std::string> data_size;
};
int cmd_ablate(const AblateArgs& args, std::ostream& out, std::ostream& err);

struct GridCell {
  std::string row;  // e.g. "adalora_wo_orth"
  AdapterSpec spec;
};
/// Cells of the named grid in summary order; throws ValidationError for an unknown name.
std::vector<GridCell> ablation_grid(std::string_view grid);

}  // namespace peftlab
