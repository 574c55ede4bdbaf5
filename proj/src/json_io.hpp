#pragma once

// Internal JSON helpers shared by the config loader and the command layer.

#include <nlohmann/json.hpp>

#include "peftlab/config.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab::detail {

using Json = nlohmann::json;

Json to_json(const RunConfig& config);
Json to_json(const ArchSpec& arch);
Json to_json(const AdapterSpec& spec);
Json to_json(const TrainConfig& tcfg);
Json to_json(const TaskSpec& task);
Json to_json(const StepRecord& rec);
Json to_json(const RankReport& report);

/// Stable text: sorted keys, shortest round-trip doubles, trailing newline.
std::string dump(const Json& j);

}  // namespace peftlab::detail
