#include "hesd/datasets.hpp"

#include <cmath>
#include <numbers>

#include "hesd/error.hpp"
#include "hesd/rng.hpp"

namespace hesd {

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::gaussian_blobs: return "gaussian-blobs";
    case DatasetKind::two_moons: return "two-moons";
    case DatasetKind::random_label: return "random-label";
  }
  return "?";
}

DatasetKind parse_dataset_kind(const std::string& text) {
  if (text == "gaussian-blobs") return DatasetKind::gaussian_blobs;
  if (text == "two-moons") return DatasetKind::two_moons;
  if (text == "random-label") return DatasetKind::random_label;
  throw ConfigError("dataset.kind", "unknown dataset kind '" + text + "'");
}

std::string to_string(DatasetTag tag) {
  return tag == DatasetTag::train ? "train" : "generalization";
}

DatasetTag parse_dataset_tag(const std::string& text) {
  if (text == "train") return DatasetTag::train;
  if (text == "generalization" || text == "gen") return DatasetTag::generalization;
  throw ConfigError("dataset_tag", "expected 'train' or 'generalization', got '" + text + "'");
}

void DatasetConfig::validate() const {
  if (train_samples == 0) throw ConfigError("dataset.train_samples", "must be positive");
  if (generalization_samples == 0)
    throw ConfigError("dataset.generalization_samples", "must be positive");
  if (input_dim == 0) throw ConfigError("dataset.input_dim", "must be positive");
  if (classes < 2) throw ConfigError("dataset.classes", "need at least 2 classes");
  if (kind == DatasetKind::two_moons && input_dim < 2)
    throw ConfigError("dataset.input_dim", "two-moons needs at least 2 dimensions");
  if (!(noise >= 0.0)) throw ConfigError("dataset.noise", "must be non-negative");
}

namespace {

enum Stream : std::uint64_t { kCentres = 1, kShift = 2, kTrain = 3, kGeneralization = 4 };

std::vector<double> unit_vector(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  while (n < 1e-12) {
    for (double& x : v) x = rng.normal();
    n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
  }
  for (double& x : v) x /= n;
  return v;
}

Batch draw_split(const DatasetConfig& cfg, const std::vector<std::vector<double>>& centres,
                 const std::vector<double>& offset, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = cfg.input_dim;
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % cfg.classes);
  rng.shuffle(labels);

  Tensor x({count, d});
  for (std::size_t i = 0; i < count; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    double* row = &x[i * d];
    switch (cfg.kind) {
      case DatasetKind::gaussian_blobs:
        for (std::size_t j = 0; j < d; ++j) row[j] = centres[c][j] + cfg.noise * rng.normal();
        break;
      case DatasetKind::two_moons: {
        // classes come in interleaved pairs of half circles; pair p sits
        // p * (2 + separation) along the first axis
        const double t = std::numbers::pi * rng.uniform();
        const double base = static_cast<double>(c / 2) * (2.0 + cfg.separation);
        if (c % 2 == 0) {
          row[0] = base + std::cos(t);
          row[1] = std::sin(t);
        } else {
          row[0] = base + 1.0 - std::cos(t);
          row[1] = 0.5 - std::sin(t);
        }
        for (std::size_t j = 0; j < d; ++j) row[j] += cfg.noise * rng.normal();
        break;
      }
      case DatasetKind::random_label:
        for (std::size_t j = 0; j < d; ++j) row[j] = rng.normal();
        break;
    }
    for (std::size_t j = 0; j < d; ++j) row[j] += offset[j];
  }
  return Batch{std::move(x), std::move(labels)};
}

}  // namespace

SyntheticDataset make_dataset(const DatasetConfig& config) {
  config.validate();
  const std::size_t d = config.input_dim;

  std::vector<std::vector<double>> centres(config.classes, std::vector<double>(d, 0.0));
  Rng centre_rng(derive_seed(config.seed, kCentres));
  for (std::size_t c = 0; c < config.classes; ++c) {
    if (config.classes <= d) {
      centres[c][c] = config.separation;
    } else {
      auto u = unit_vector(centre_rng, d);
      for (std::size_t j = 0; j < d; ++j) centres[c][j] = config.separation * u[j];
    }
  }

  Rng shift_rng(derive_seed(config.seed, kShift));
  auto direction = unit_vector(shift_rng, d);
  std::vector<double> no_offset(d, 0.0), gen_offset(d);
  for (std::size_t j = 0; j < d; ++j) gen_offset[j] = config.shift * direction[j];

  SyntheticDataset out;
  out.config = config;
  out.train = draw_split(config, centres, no_offset, config.train_samples,
                         derive_seed(config.seed, kTrain));
  out.generalization = draw_split(config, centres, gen_offset, config.generalization_samples,
                                  derive_seed(config.seed, kGeneralization));
  return out;
}

}  // namespace hesd
