#pragma once

#include <string>

#include <json.hpp>

#include "danp/model.hpp"
#include "danp/objective.hpp"
#include "danp/taskgen.hpp"

namespace danp {

struct IoConfig {
    std::string curve;  // empty: curve.csv next to the checkpoint

    friend bool operator==(const IoConfig&, const IoConfig&) = default;
};

/// Everything a run needs besides its seed. The thread count is a runtime
/// flag and is not part of the serialized config.
struct RunConfig {
    ModelConfig model;
    TrainSpec train;
    ScenarioParams scenario;
    IoConfig io;

    /// Model, train and scenario validation in that order.
    void validate() const;
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Full config with every field present; object keys come out sorted.
nlohmann::json run_config_to_json(const RunConfig& config);

/// Missing fields take their defaults; unknown keys and wrong types throw
/// ConfigError naming the dotted field path.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Parse errors are reported as ConfigError("config", "... line L, column C ...").
RunConfig load_run_config(const std::string& path);

}  // namespace danp
