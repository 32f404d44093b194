#pragma once

#include <filesystem>

#include "ltn/synthbench/pipeline.hpp"

// Checkpoint directory:
//   model.json        schema version, configuration, feature normalizers, layout scale, metrics
//   codebook.ltnc     the scene codebook
//   detector.ltnw, classifier.ltnw, layout.ltnw, and fusion.ltnw for early fusion
namespace ltn::synth {

inline constexpr int kCheckpointSchemaVersion = 1;

void save_system(TrainedSystem& system, const std::filesystem::path& dir);

/// Rebuilds every network from the stored configuration and restores its
/// weights. Throws DataError on a malformed model.json and the file errors of
/// the binary containers otherwise.
TrainedSystem load_system(const std::filesystem::path& dir);

/// Training log as JSON lines {"phase", "epoch", "metric", "value"}.
std::string encode_training_log(const TrainingLog& log);

}  // namespace ltn::synth
