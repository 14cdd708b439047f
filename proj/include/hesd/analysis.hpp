#pragma once

// Glue from a stored checkpoint to its criteria report: rebuild the model and
// dataset split, run SLQ on the eval-mode loss Hessian, and fill the report.

#include <filesystem>
#include <optional>

#include "hesd/io.hpp"

namespace hesd {

struct CheckpointAnalysis {
  AnalysisRecord record;
  SlqResult slq;
};

/// `qs_baseline` is the max |lambda| of the run's first train checkpoint,
/// when known.
CheckpointAnalysis analyze_checkpoint(const RunConfig& config, const Checkpoint& checkpoint,
                                      DatasetTag tag, const AnalysisConfig& analysis,
                                      std::optional<double> qs_baseline = std::nullopt);

/// Trains from the config's seed and writes config.json, one
/// epoch-XXXXXX.ckpt per checkpoint and metrics.csv into `dir`.
TrainResult train_to_directory(const RunConfig& config, const std::filesystem::path& dir);

std::string metrics_csv(const TrainResult& result, const RunConfig& config);

}  // namespace hesd
