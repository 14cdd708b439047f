#pragma once

#include <cstdint>
#include <string>

#include "hesd/models.hpp"

namespace hesd {

enum class DatasetKind { gaussian_blobs, two_moons, random_label };

std::string to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& text);

struct DatasetConfig {
  DatasetKind kind = DatasetKind::gaussian_blobs;
  std::size_t train_samples = 200;
  std::size_t generalization_samples = 200;
  std::size_t input_dim = 4;
  std::size_t classes = 3;
  std::uint64_t seed = 0;
  /// Distance of blob centres from the origin; arc spacing for moons.
  double separation = 4.0;
  double noise = 0.5;
  /// Translation of the generalization split along a fixed random
  /// direction, emulating a dataset shift between train and test domains.
  double shift = 0.0;

  void validate() const;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

enum class DatasetTag { train, generalization };

std::string to_string(DatasetTag tag);
DatasetTag parse_dataset_tag(const std::string& text);

struct SyntheticDataset {
  DatasetConfig config;
  Batch train;
  Batch generalization;

  const Batch& split(DatasetTag tag) const {
    return tag == DatasetTag::train ? train : generalization;
  }
};

/// Both splits are class-balanced (counts differ by at most one) and drawn
/// from independent random streams of the configured seed.
SyntheticDataset make_dataset(const DatasetConfig& config);

}  // namespace hesd
