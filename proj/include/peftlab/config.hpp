#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "peftlab/adapters.hpp"
#include "peftlab/task.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab {

/// Configuration problem tied to a location in the document.
class ConfigError : public ValidationError {
 public:
  ConfigError(std::string field, int line, const std::string& message);
  const std::string& field() const { return field_; }
  int line() const { return line_; }  // 0 when unknown

 private:
  std::string field_;
  int line_;
};

/// Everything a run needs. Every field has a default, so "{}" describes a
/// toy-small LoRA run.
struct RunConfig {
  ArchSpec arch = ArchSpec::toy_small();
  AdapterSpec adapter;
  TrainConfig train;
  TrainConfig pretrain = default_pretrain();
  TaskSpec task;
  std::uint64_t task_seed = 11;
  DataSize data_size = DataSize::small;
  std::uint64_t seed = 0;

  static TrainConfig default_pretrain();
  void validate() const;
};

/// Parses a JSON document. Unknown keys and ill-typed values raise ConfigError
/// naming the dotted field path and its line.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical JSON rendering (sorted keys), parseable by parse_run_config.
std::string run_config_json(const RunConfig& config, int indent = 2);

}  // namespace peftlab
