#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "capscl/model.hpp"
#include "capscl/trainer.hpp"

namespace capscl {

/// Raised for malformed or invalid run configurations. The message names the
/// offending key, e.g. "ksm.capsule_dim: expected an unsigned integer".
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunPaths {
    std::string suite;  ///< suite directory or suite.json
    std::string out;    ///< run output directory
};

struct RunConfig {
    ModelConfig model;
    TrainerConfig trainer;
    RunPaths paths;

    /// Throws ConfigError when any section is inconsistent.
    void validate() const;
};

/// Strict parse: unknown keys, wrong types and out-of-range values are
/// errors; missing keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& j);
/// Every field, in a stable key order.
nlohmann::json config_to_json(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace capscl
