#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hesd/autodiff.hpp"
#include "hesd/objective.hpp"
#include "hesd/parameters.hpp"

namespace hesd {

enum class ModelKind { mlp, convnet, wide_dense };
enum class Activation { relu, tanh };

std::string to_string(ModelKind kind);
std::string to_string(Activation activation);
ModelKind parse_model_kind(const std::string& text);
Activation parse_activation(const std::string& text);

/// Architecture description. Layer sizes run input -> hidden... -> classes.
///
/// - mlp: dense hidden layers.
/// - wide-dense: a dense block of `wide_width` units ahead of the hidden
///   layers, standing in for the wide hidden dimension of attention blocks.
/// - convnet: a same-padded 1-D convolution over the input features
///   (`conv_channels` filters of `kernel_size` taps) followed by the hidden
///   layers.
///
/// Batch normalization, when enabled, follows every dense hidden layer.
struct ModelSpec {
  ModelKind kind = ModelKind::mlp;
  std::size_t input_dim = 4;
  std::vector<std::size_t> hidden = {8};
  std::size_t classes = 3;
  Activation activation = Activation::relu;
  bool use_batchnorm = false;
  std::size_t wide_width = 64;
  std::size_t conv_channels = 4;
  std::size_t kernel_size = 3;
  std::size_t parameter_cap = 50000;

  static ModelSpec mlp(std::vector<std::size_t> layers, Activation act = Activation::relu);
  void validate() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct Batch {
  Tensor inputs;  // (n x input_dim)
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  /// Throws ShapeError unless rows match labels and labels lie in [0, classes).
  void validate(std::size_t input_dim, std::size_t classes) const;
  Batch subset(std::span<const std::size_t> rows) const;
};

enum class Mode { eval, train };

class Model {
 public:
  explicit Model(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  const SegmentTable& layout() const { return layout_; }
  /// Running batch-normalization statistics; empty without batchnorm.
  const SegmentTable& buffer_layout() const { return buffer_layout_; }
  std::size_t parameter_count() const { return layout_.total_size(); }

  /// Logits for `inputs`. In train mode batch statistics are used and, when
  /// `updated_buffers` is given, the running statistics are advanced into it.
  ad::Var forward(ad::Tape& tape, std::span<const ad::Var> params,
                  const ParameterVector& buffers, const Tensor& inputs, Mode mode,
                  ParameterVector* updated_buffers = nullptr) const;

  ParameterVector initial_buffers() const;
  std::vector<int> predict(const ParameterVector& params, const ParameterVector& buffers,
                           const Tensor& inputs) const;
  double accuracy(const ParameterVector& params, const ParameterVector& buffers,
                  const Batch& batch) const;

  /// Fresh draws for the given segments, using the model's initializer.
  void reinitialize(ParameterVector& params, std::span<const std::size_t> segments,
                    std::uint64_t seed) const;

  static constexpr double kBatchNormEps = 1e-5;
  static constexpr double kBatchNormMomentum = 0.1;

 private:
  ad::Var dense_block(ad::Tape& tape, std::span<const ad::Var> params, std::size_t& next,
                      std::size_t& next_buffer, ad::Var h, const ParameterVector& buffers,
                      Mode mode, ParameterVector* updated_buffers) const;
  ad::Var activate(ad::Var h) const;

  ModelSpec spec_;
  SegmentTable layout_;
  SegmentTable buffer_layout_;
  std::vector<std::size_t> fan_in_;
};

struct BuiltModel {
  Model model;
  ParameterVector params;
  ParameterVector buffers;
};

/// Scaled-uniform initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
/// weights and biases; batchnorm scale 1 and shift 0.
BuiltModel build_model(const ModelSpec& spec, std::uint64_t seed);

/// Mean cross-entropy of a classifier on one batch.
class ClassifierObjective : public Objective {
 public:
  ClassifierObjective(const Model& model, ParameterVector buffers, Batch batch,
                      Mode mode = Mode::eval);
  const SegmentTable& layout() const override { return model_.layout(); }
  ad::Var build_loss(ad::Tape& tape, std::span<const ad::Var> params) const override;
  const Batch& batch() const { return batch_; }

 private:
  const Model& model_;
  ParameterVector buffers_;
  Batch batch_;
  Mode mode_;
};

double loss_forward(const Model& model, const ParameterVector& params, const Batch& batch);
ParameterVector gradient(const Model& model, const ParameterVector& params, const Batch& batch);
ParameterVector hvp(const Model& model, const ParameterVector& params, const Batch& batch,
                    const ParameterVector& v);

}  // namespace hesd
