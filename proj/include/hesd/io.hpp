#pragma once

// On-disk formats: the JSON run config, the binary checkpoint file, and the
// JSON/CSV artifacts emitted by analysis. Byte layouts are documented in
// docs/FORMATS.md. Every writer goes through write_file_atomic.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hesd/criteria.hpp"
#include "hesd/train.hpp"

namespace hesd {

using json = nlohmann::ordered_json;

/// Major version of every JSON artifact; loaders reject anything newer.
inline constexpr int kSchemaVersion = 1;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'H', 'E', 'S', 'D', 'C', 'K', 'P', 'T'};

struct AnalysisConfig {
  SlqOptions slq;
  CriteriaThresholds thresholds;
  double qs_relative = 1e-3;
  double qs_absolute = 1e-6;

  void validate() const;
  QsTolerance qs(std::optional<double> baseline = std::nullopt) const;
};

/// Everything needed to reproduce a run. The dataset's input_dim and classes
/// always follow the model.
struct RunConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;  // model initialization and training stream
  ModelSpec model;
  DatasetConfig dataset;
  OptimizerConfig optimizer;
  TrainConfig train;
  AnalysisConfig analysis;

  void validate() const;
  DatasetConfig dataset_config() const;
  TrainConfig train_config() const;
};

json to_json(const RunConfig& config);
/// Unknown keys and wrong types throw ConfigError naming the dotted path.
RunConfig run_config_from_json(const json& j);
RunConfig load_run_config(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes);
/// FNV-1a of the canonical config JSON, as 16 lowercase hex digits.
std::string config_hash(const RunConfig& config);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

struct CheckpointFile {
  RunConfig config;
  Checkpoint checkpoint;
};

std::string checkpoint_id(const std::string& run_id, std::int64_t epoch);
/// "epoch-000010"
std::string epoch_stem(std::int64_t epoch);

std::string encode_checkpoint(const RunConfig& config, const Checkpoint& checkpoint);
/// Throws FormatError on a bad magic, unsupported version, malformed header,
/// or payload length that disagrees with the segment table.
CheckpointFile decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                     const Checkpoint& checkpoint);
CheckpointFile load_checkpoint(const std::filesystem::path& path);

/// Provenance and context carried next to a CriteriaReport on disk.
struct AnalysisRecord {
  CriteriaReport report;
  std::int64_t epoch = 0;
  double train_accuracy = 0.0;
  double generalization_accuracy = 0.0;
  std::string run_id;
  std::uint64_t seed = 0;
  std::string config_hash;
  SlqOptions slq;
  double sigma = 0.0;
  bool degenerate = false;
  std::string density_file;
};

json to_json(const CriteriaReport& report);
CriteriaReport criteria_report_from_json(const json& j);
json to_json(const AnalysisRecord& record);
AnalysisRecord analysis_record_from_json(const json& j);

struct VerdictRecord {
  Verdict verdict;
  CriteriaThresholds thresholds;
  std::uint64_t seed = 0;
  std::string config_hash;
};
json to_json(const VerdictRecord& record);
VerdictRecord verdict_record_from_json(const json& j);

/// Two columns, lambda and density, after '#' provenance lines.
std::string density_csv(const SpectralDensity& density, const AnalysisRecord& record);
SpectralDensity parse_density_csv(std::string_view text);

struct RunReportRow {
  std::int64_t epoch = 0;
  std::string checkpoint_id;
  CriteriaReport train;
  std::optional<CriteriaReport> generalization;
  double train_accuracy = 0.0;
  double generalization_accuracy = 0.0;
  DeltaCriteria deltas;
};

struct RunReport {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::optional<double> qs_baseline;
  std::vector<RunReportRow> rows;  // sorted by epoch
  std::vector<std::string> missing;
};

/// Pairs train and generalization records by checkpoint, sorts by epoch and
/// reclassifies every report against the first epoch's QS baseline.
RunReport build_run_report(std::vector<AnalysisRecord> records, const AnalysisConfig& analysis);
std::vector<EpochCandidate> selection_candidates(const RunReport& report);

json to_json(const RunReport& report);
RunReport run_report_from_json(const json& j);
std::string run_report_csv(const RunReport& report);

/// Shortest round-trip decimal form of a double; "nan"/"inf"/"-inf" for
/// non-finite values.
std::string format_double(double x);

}  // namespace hesd
