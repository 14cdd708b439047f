#pragma once

// Optimizers and the training loop that produces checkpoint series. Besides
// the standard first-order rules this includes the two gradient-manipulating
// regimes: AdaHessian with spatially averaged Hessian diagonals, and
// global-norm gradient clipping.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hesd/datasets.hpp"
#include "hesd/models.hpp"

namespace hesd {

enum class OptimizerKind { sgd, sgd_momentum, adamw, adahessian };
std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.1;
  double momentum = 0.9;
  // adamw and adahessian
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  // adahessian
  std::size_t hutchinson_probes = 1;
  std::size_t block_size = 1;
  double hessian_power = 1.0;

  std::optional<double> clip_global_norm;
  std::vector<std::string> frozen;

  /// Throws ConfigError naming the offending field. With a layout, frozen
  /// names must be segments of it.
  void validate(const SegmentTable* layout = nullptr) const;
};

/// Flat buffers aligned with the parameter layout.
struct OptimizerState {
  std::vector<double> velocity;      // sgd-momentum
  std::vector<double> m;             // first moment
  std::vector<double> v;             // second moment (of g, or of averaged D)
  std::vector<double> hessian_diag;  // last averaged D (adahessian)
  std::uint64_t step = 0;
};

/// Scales g in place to norm c when its norm exceeds c. Returns the norm
/// before clipping.
double clip_global_norm(std::span<double> g, double c);

void sgd_step(std::span<double> w, std::span<const double> g, const OptimizerConfig& cfg);
void sgd_momentum_step(std::span<double> w, std::span<const double> g, OptimizerState& state,
                       const OptimizerConfig& cfg);
/// Decoupled weight decay and bias-corrected moments.
void adamw_step(std::span<double> w, std::span<const double> g, OptimizerState& state,
                const OptimizerConfig& cfg);

/// Replaces each entry of d by the mean of |d| over its block. Blocks are
/// contiguous runs of `block_size` entries within a segment; the last block
/// of a segment may be shorter.
void block_average(std::span<double> d, const SegmentTable& layout, std::size_t block_size);

/// Hutchinson diagonal z * (Hz) over `probes` Rademacher vectors, then
/// block-averaged.
std::vector<double> adahessian_diagonal(const LinearOperator& hvp, const SegmentTable& layout,
                                        std::size_t probes, std::size_t block_size,
                                        std::uint64_t seed);

/// Update -lr * m_hat / ((sqrt(v_hat))^k + eps) with v tracking the averaged
/// diagonal squared, plus decoupled weight decay.
void adahessian_step(std::span<double> w, std::span<const double> g, std::span<const double> d,
                     OptimizerState& state, const OptimizerConfig& cfg);

/// Optimizer bound to a layout: applies clipping and freezing around the
/// per-rule steps. Frozen segments keep their exact bits.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const SegmentTable& layout, std::uint64_t seed);

  const OptimizerConfig& config() const { return config_; }
  const OptimizerState& state() const { return state_; }
  bool needs_hvp() const { return config_.kind == OptimizerKind::adahessian; }

  /// Throws NumericalError on a non-finite gradient or Hessian diagonal,
  /// leaving params and state untouched. `hvp` is required for adahessian.
  void step(ParameterVector& params, std::span<const double> grads,
            const LinearOperator* hvp = nullptr);

 private:
  OptimizerConfig config_;
  SegmentTable layout_;
  std::uint64_t seed_;
  std::vector<bool> frozen_;
  OptimizerState state_;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 0;  // 0 = full batch
  std::size_t checkpoint_every = 10;
  bool checkpoint_initial = true;
  std::uint64_t seed = 0;
  /// When set, the run ends at epoch p + ceil(factor * p), p being the first
  /// epoch at 100% train accuracy, with checkpoints at both; `epochs` stays
  /// the upper bound.
  std::optional<double> past_plateau_factor;
  /// Fine-tuning: draw fresh values for the first and last segment groups
  /// (input and classifier layers) before training.
  bool reinitialize_io_layers = false;
  /// Extra segments to reinitialize before training.
  std::vector<std::string> reinitialize;

  void validate() const;
};

struct Checkpoint {
  std::int64_t epoch = 0;
  ParameterVector params;
  ParameterVector buffers;
  double train_accuracy = 0.0;
  double generalization_accuracy = 0.0;
  double train_loss = 0.0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  std::string run_id;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  std::int64_t epoch = 0;
  double train_loss = 0.0;  // mean minibatch loss before each step
  double train_accuracy = 0.0;
  double generalization_accuracy = 0.0;
  double grad_norm = 0.0;  // mean pre-clipping norm
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<EpochMetrics> metrics;
  /// First epoch at which train accuracy reached 1.
  std::optional<std::int64_t> plateau_epoch;
  bool diverged = false;
  std::string divergence_message;
  ParameterVector final_params;
  ParameterVector final_buffers;
};

/// Segment indices of the first and last layers: everything up to and
/// including the first bias, and the classifier head.
std::vector<std::size_t> io_layer_segments(const Model& model);

/// Runs the loop. A non-finite loss or update ends the run early with
/// `diverged` set; checkpoints taken before that are kept.
TrainResult train(const Model& model, ParameterVector params, ParameterVector buffers,
                  const SyntheticDataset& data, const OptimizerConfig& optimizer,
                  const TrainConfig& config, const std::string& run_id = "run");

}  // namespace hesd
