#include "hesd/models.hpp"

#include <algorithm>
#include <cmath>

#include "hesd/error.hpp"
#include "hesd/rng.hpp"

namespace hesd {

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::mlp: return "mlp";
    case ModelKind::convnet: return "convnet";
    case ModelKind::wide_dense: return "wide-dense";
  }
  return "?";
}

std::string to_string(Activation activation) {
  return activation == Activation::relu ? "relu" : "tanh";
}

ModelKind parse_model_kind(const std::string& text) {
  if (text == "mlp") return ModelKind::mlp;
  if (text == "convnet") return ModelKind::convnet;
  if (text == "wide-dense") return ModelKind::wide_dense;
  throw ConfigError("model.kind", "unknown model kind '" + text + "'");
}

Activation parse_activation(const std::string& text) {
  if (text == "relu") return Activation::relu;
  if (text == "tanh") return Activation::tanh;
  throw ConfigError("model.activation", "unknown activation '" + text + "'");
}

ModelSpec ModelSpec::mlp(std::vector<std::size_t> layers, Activation act) {
  if (layers.size() < 3) throw ConfigError("model.layers", "need input, >=1 hidden and output sizes");
  ModelSpec spec;
  spec.kind = ModelKind::mlp;
  spec.input_dim = layers.front();
  spec.classes = layers.back();
  spec.hidden.assign(layers.begin() + 1, layers.end() - 1);
  spec.activation = act;
  return spec;
}

void ModelSpec::validate() const {
  if (input_dim == 0) throw ConfigError("model.input_dim", "must be positive");
  if (classes < 2) throw ConfigError("model.classes", "need at least 2 classes");
  for (auto h : hidden)
    if (h == 0) throw ConfigError("model.hidden", "layer sizes must be positive");
  if (kind == ModelKind::mlp && hidden.empty())
    throw ConfigError("model.hidden", "an mlp needs at least one hidden layer");
  if (kind == ModelKind::wide_dense && wide_width == 0)
    throw ConfigError("model.wide_width", "must be positive");
  if (kind == ModelKind::convnet) {
    if (conv_channels == 0) throw ConfigError("model.conv_channels", "must be positive");
    if (kernel_size == 0 || kernel_size % 2 == 0)
      throw ConfigError("model.kernel_size", "must be a positive odd number");
  }
}

void Batch::validate(std::size_t input_dim, std::size_t classes) const {
  if (labels.empty()) throw ShapeError("batch is empty");
  if (inputs.rank() != 2 || inputs.rows() != labels.size())
    throw ShapeError("batch inputs " + shape_string(inputs.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  if (inputs.cols() != input_dim)
    throw ShapeError("batch input width " + std::to_string(inputs.cols()) + ", model expects " +
                     std::to_string(input_dim));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw ShapeError("label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
}

Batch Batch::subset(std::span<const std::size_t> rows) const {
  const std::size_t d = inputs.cols();
  std::vector<double> data;
  data.reserve(rows.size() * d);
  std::vector<int> ys;
  ys.reserve(rows.size());
  for (auto r : rows) {
    auto row = inputs.values().subspan(r * d, d);
    data.insert(data.end(), row.begin(), row.end());
    ys.push_back(labels[r]);
  }
  return Batch{Tensor({rows.size(), d}, std::move(data)), std::move(ys)};
}

namespace {

constexpr std::size_t kOnes = 0;
constexpr std::size_t kZeros = static_cast<std::size_t>(-1);

}  // namespace

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  std::vector<std::pair<std::string, Shape>> entries;
  std::vector<std::pair<std::string, Shape>> buffers;

  auto dense = [&](const std::string& prefix, const std::string& bn, std::size_t in,
                   std::size_t out, bool norm) {
    entries.push_back({prefix + ".weight", {in, out}});
    fan_in_.push_back(in);
    entries.push_back({prefix + ".bias", {out}});
    fan_in_.push_back(in);
    if (norm) {
      entries.push_back({bn + ".gamma", {out}});
      fan_in_.push_back(kOnes);
      entries.push_back({bn + ".beta", {out}});
      fan_in_.push_back(kZeros);
      buffers.push_back({bn + ".running_mean", {out}});
      buffers.push_back({bn + ".running_var", {out}});
    }
  };

  std::size_t width = spec_.input_dim;
  if (spec_.kind == ModelKind::convnet) {
    entries.push_back({"conv.kernel", {spec_.kernel_size, spec_.conv_channels}});
    fan_in_.push_back(spec_.kernel_size);
    entries.push_back({"conv.bias", {spec_.conv_channels}});
    fan_in_.push_back(spec_.kernel_size);
    width = spec_.input_dim * spec_.conv_channels;
  } else if (spec_.kind == ModelKind::wide_dense) {
    dense("wide", "wide_bn", width, spec_.wide_width, spec_.use_batchnorm);
    width = spec_.wide_width;
  }
  for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
    dense("dense" + std::to_string(l), "bn" + std::to_string(l), width, spec_.hidden[l],
          spec_.use_batchnorm);
    width = spec_.hidden[l];
  }
  dense("head", "", width, spec_.classes, false);

  layout_ = SegmentTable(std::move(entries));
  buffer_layout_ = SegmentTable(std::move(buffers));
  if (layout_.total_size() > spec_.parameter_cap)
    throw ConfigError("model.parameter_cap", "model has " + std::to_string(layout_.total_size()) +
                                                 " parameters, cap is " +
                                                 std::to_string(spec_.parameter_cap));
}

ParameterVector Model::initial_buffers() const {
  ParameterVector buffers = ParameterVector::zeros(buffer_layout_);
  for (std::size_t i = 1; i < buffer_layout_.count(); i += 2)
    std::fill(buffers.segment(i).begin(), buffers.segment(i).end(), 1.0);
  return buffers;
}

void Model::reinitialize(ParameterVector& params, std::span<const std::size_t> segments,
                         std::uint64_t seed) const {
  require_same_layout(layout_, params.layout());
  for (std::size_t i : segments) {
    if (i >= layout_.count()) throw ShapeError("segment index out of range");
    auto values = params.segment(i);
    if (fan_in_[i] == kOnes) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (fan_in_[i] == kZeros) {
      std::fill(values.begin(), values.end(), 0.0);
    } else {
      Rng rng(derive_seed(seed, i));
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in_[i]));
      for (double& w : values) w = rng.uniform(-bound, bound);
    }
  }
}

ad::Var Model::activate(ad::Var h) const {
  return spec_.activation == Activation::relu ? ad::relu(h) : ad::tanh(h);
}

ad::Var Model::dense_block(ad::Tape& tape, std::span<const ad::Var> params, std::size_t& next,
                           std::size_t& next_buffer, ad::Var h, const ParameterVector& buffers,
                           Mode mode, ParameterVector* updated_buffers) const {
  h = ad::add_row(ad::matmul(h, params[next]), params[next + 1]);
  next += 2;
  if (!spec_.use_batchnorm) return activate(h);

  const std::size_t n = h.value().rows();
  const std::size_t width = h.value().cols();
  ad::Var normalized;
  if (mode == Mode::train) {
    if (n < 2) throw ShapeError("batchnorm in train mode needs at least 2 samples");
    ad::Var mean = ad::scale(ad::sum_rows(h), 1.0 / static_cast<double>(n));
    ad::Var centered = ad::sub(h, ad::broadcast_rows(mean, n));
    ad::Var var = ad::scale(ad::sum_rows(ad::mul(centered, centered)), 1.0 / static_cast<double>(n));
    ad::Var inv = ad::pow_scalar(ad::add_scalar(var, kBatchNormEps), -0.5);
    normalized = ad::mul(centered, ad::broadcast_rows(inv, n));
    if (updated_buffers) {
      auto run_mean = updated_buffers->segment(next_buffer);
      auto run_var = updated_buffers->segment(next_buffer + 1);
      const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
      for (std::size_t j = 0; j < width; ++j) {
        run_mean[j] = (1 - kBatchNormMomentum) * run_mean[j] + kBatchNormMomentum * mean.value()[j];
        run_var[j] =
            (1 - kBatchNormMomentum) * run_var[j] + kBatchNormMomentum * var.value()[j] * unbias;
      }
    }
  } else {
    auto run_mean = buffers.segment(next_buffer);
    auto run_var = buffers.segment(next_buffer + 1);
    Tensor scale_row({1, width}), shift_row({1, width});
    for (std::size_t j = 0; j < width; ++j) {
      scale_row[j] = 1.0 / std::sqrt(run_var[j] + kBatchNormEps);
      shift_row[j] = -run_mean[j] * scale_row[j];
    }
    normalized = ad::add_row(ad::mul_row(h, tape.constant(std::move(scale_row))),
                             tape.constant(std::move(shift_row)));
  }
  next_buffer += 2;
  h = ad::add_row(ad::mul_row(normalized, params[next]), params[next + 1]);
  next += 2;
  return activate(h);
}

ad::Var Model::forward(ad::Tape& tape, std::span<const ad::Var> params,
                       const ParameterVector& buffers, const Tensor& inputs, Mode mode,
                       ParameterVector* updated_buffers) const {
  if (params.size() != layout_.count())
    throw ShapeError("expected " + std::to_string(layout_.count()) + " parameter tensors");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != layout_[i].shape)
      throw ShapeError("segment '" + layout_[i].name + "' has shape " +
                           shape_string(params[i].shape()) + ", expected " +
                           shape_string(layout_[i].shape),
                       layout_[i].name);
  require_same_layout(buffer_layout_, buffers.layout());
  if (inputs.rank() != 2 || inputs.cols() != spec_.input_dim)
    throw ShapeError("inputs " + shape_string(inputs.shape()) + " do not have " +
                     std::to_string(spec_.input_dim) + " features");
  if (updated_buffers && updated_buffers != &buffers) *updated_buffers = buffers;

  const std::size_t n = inputs.rows();
  std::size_t next = 0;
  std::size_t next_buffer = 0;
  ad::Var h = tape.constant(inputs);

  if (spec_.kind == ModelKind::convnet) {
    const std::size_t d = spec_.input_dim;
    const std::size_t k = spec_.kernel_size;
    const long half = static_cast<long>(k / 2);
    std::vector<long> index(n * d * k);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < d; ++p)
        for (std::size_t t = 0; t < k; ++t) {
          const long q = static_cast<long>(p) + static_cast<long>(t) - half;
          index[(s * d + p) * k + t] =
              (q >= 0 && q < static_cast<long>(d)) ? static_cast<long>(s * d) + q : -1;
        }
    ad::Var patches = ad::gather(h, std::move(index), {n * d, k});
    ad::Var conv = ad::add_row(ad::matmul(patches, params[0]), params[1]);
    h = ad::reshape(activate(conv), {n, d * spec_.conv_channels});
    next = 2;
  } else if (spec_.kind == ModelKind::wide_dense) {
    h = dense_block(tape, params, next, next_buffer, h, buffers, mode, updated_buffers);
  }
  for (std::size_t l = 0; l < spec_.hidden.size(); ++l)
    h = dense_block(tape, params, next, next_buffer, h, buffers, mode, updated_buffers);
  return ad::add_row(ad::matmul(h, params[next]), params[next + 1]);
}

std::vector<int> Model::predict(const ParameterVector& params, const ParameterVector& buffers,
                                const Tensor& inputs) const {
  require_same_layout(layout_, params.layout());
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (std::size_t i = 0; i < layout_.count(); ++i) vars.push_back(tape.constant(params.tensor(i)));
  const Tensor& logits = forward(tape, vars, buffers, inputs, Mode::eval).value();
  std::vector<int> out(logits.rows());
  const std::size_t k = logits.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto row = logits.values().subspan(i * k, k);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double Model::accuracy(const ParameterVector& params, const ParameterVector& buffers,
                       const Batch& batch) const {
  batch.validate(spec_.input_dim, spec_.classes);
  auto pred = predict(params, buffers, batch.inputs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == batch.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

BuiltModel build_model(const ModelSpec& spec, std::uint64_t seed) {
  Model model(spec);
  ParameterVector params = ParameterVector::zeros(model.layout());
  std::vector<std::size_t> all(model.layout().count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  model.reinitialize(params, all, seed);
  ParameterVector buffers = model.initial_buffers();
  return BuiltModel{std::move(model), std::move(params), std::move(buffers)};
}

ClassifierObjective::ClassifierObjective(const Model& model, ParameterVector buffers, Batch batch,
                                         Mode mode)
    : model_(model), buffers_(std::move(buffers)), batch_(std::move(batch)), mode_(mode) {
  batch_.validate(model_.spec().input_dim, model_.spec().classes);
  require_same_layout(model_.buffer_layout(), buffers_.layout());
}

ad::Var ClassifierObjective::build_loss(ad::Tape& tape, std::span<const ad::Var> params) const {
  ad::Var logits = model_.forward(tape, params, buffers_, batch_.inputs, mode_);
  return ad::cross_entropy(logits, batch_.labels);
}

double loss_forward(const Model& model, const ParameterVector& params, const Batch& batch) {
  return loss_forward(ClassifierObjective(model, model.initial_buffers(), batch), params);
}

ParameterVector gradient(const Model& model, const ParameterVector& params, const Batch& batch) {
  return gradient(ClassifierObjective(model, model.initial_buffers(), batch), params);
}

ParameterVector hvp(const Model& model, const ParameterVector& params, const Batch& batch,
                    const ParameterVector& v) {
  return hvp(ClassifierObjective(model, model.initial_buffers(), batch), params, v);
}

}  // namespace hesd
