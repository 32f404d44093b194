#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltn/synthbench/generator.hpp"
#include "ltn/synthbench/pipeline.hpp"

namespace ltn::cli {

inline constexpr int kRunConfigSchemaVersion = 1;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDivergence = 4;

/// The resolved configuration document of one command.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string dataset;     // input dataset directory
  std::string checkpoint;  // input checkpoint directory
  bool ablate_extras = false;
  int render_count = 4;
  int render_scale = 4;
  synth::BenchmarkConfig benchmark;
  nlohmann::json document;  // the merged document the fields above were read from
};

/// Every key a configuration file may set, with its default.
nlohmann::json default_run_config();

/// Defaults, then the file, then each override in order, then the seed flag.
/// Throws ConfigError on unknown keys, type mismatches, invalid values or a
/// wrong schema version.
RunConfig resolve_run_config(const std::optional<std::filesystem::path>& config_path,
                             const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed);

/// Panels side by side, each scaled by `scale` and normalized by its own
/// maximum over `channel`; an all-zero panel renders black.
synth::GrayImage render_panels(const std::vector<const Tensor<float>*>& panels, int channel, int scale);

/// Runs one command from an argument vector (program name first) and returns its exit status.
int run(const std::vector<std::string>& args);

}  // namespace ltn::cli
