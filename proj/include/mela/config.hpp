#pragma once

// Run configuration: a flat text file of `section.key = value` lines with
// `#` comments, covering every stage config plus run-level settings.

#include "mela/pipeline.hpp"
#include "mela/theory.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mela {

constexpr const char* kVersion = "0.1.0";

struct VerifyConfig {
    int bound_instances = 1000;
    int lemma_instances = 100;
    BoundInstanceConfig instance;
    bool tightness = true;
    int tightness_tasks = 10;
    int tightness_epochs = 60;
    std::vector<double> thresholds{1e-1, 1e-2, 1e-3};
};

struct RunConfig {
    RunConfig() { pipeline.apply_seed(0); }

    PipelineConfig pipeline;
    VerifyConfig verify;
    std::filesystem::path out_dir = "out";
    int threads = 1;
    int sweep_shots = 1;  // shots used for the accuracy column of `sweep`

    void validate() const;
};

/// Every accepted key, in file order of the default config.
const std::vector<std::string>& config_keys();

/// Applies one `section.key = value` setting. Throws ValidationError for
/// unknown keys and malformed values. `base` resolves relative paths.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value,
                   const std::filesystem::path& base = {});

/// Parses config text; `origin` names the source in error messages.
RunConfig parse_config(const std::string& text, const std::filesystem::path& base, const std::string& origin);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical flat key/value form, stable across runs.
json config_to_json(const RunConfig& cfg);

}  // namespace mela
