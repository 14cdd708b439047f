#include "hesd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hesd/error.hpp"
#include "hesd/rng.hpp"
#include "hesd/spectral.hpp"

namespace hesd {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd-momentum";
    case OptimizerKind::adamw: return "adamw";
    case OptimizerKind::adahessian: return "adahessian";
  }
  return "?";
}

OptimizerKind parse_optimizer_kind(const std::string& text) {
  if (text == "sgd") return OptimizerKind::sgd;
  if (text == "sgd-momentum") return OptimizerKind::sgd_momentum;
  if (text == "adamw") return OptimizerKind::adamw;
  if (text == "adahessian") return OptimizerKind::adahessian;
  throw ConfigError("optimizer.kind", "unknown optimizer '" + text + "'");
}

void OptimizerConfig::validate(const SegmentTable* layout) const {
  auto positive = [](double x) { return x > 0.0 && std::isfinite(x); };
  if (!positive(learning_rate)) throw ConfigError("optimizer.learning_rate", "must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer.momentum", "must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer.beta2", "must lie in [0, 1)");
  if (!positive(epsilon)) throw ConfigError("optimizer.epsilon", "must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
    throw ConfigError("optimizer.weight_decay", "must be nonnegative");
  if (hutchinson_probes == 0) throw ConfigError("optimizer.hutchinson_probes", "must be at least 1");
  if (block_size == 0) throw ConfigError("optimizer.block_size", "must be at least 1");
  if (!positive(hessian_power)) throw ConfigError("optimizer.hessian_power", "must be positive");
  if (clip_global_norm && !positive(*clip_global_norm))
    throw ConfigError("optimizer.clip_global_norm", "must be positive");
  if (layout)
    for (const auto& name : frozen)
      if (!layout->find(name)) throw ConfigError("optimizer.frozen", "no segment named '" + name + "'");
}

double clip_global_norm(std::span<double> g, double c) {
  if (!(c > 0.0)) throw ConfigError("optimizer.clip_global_norm", "must be positive");
  const double norm = norm2(g);
  if (norm <= c) return norm;
  double scale = c / norm;
  scale_in_place(scale, g);
  // rounding can leave the result an ulp above c
  while (norm2(g) > c) {
    scale = std::nextafter(1.0, 0.0);
    scale_in_place(scale, g);
  }
  return norm;
}

void sgd_step(std::span<double> w, std::span<const double> g, const OptimizerConfig& cfg) {
  axpy(-cfg.learning_rate, g, w);
}

void sgd_momentum_step(std::span<double> w, std::span<const double> g, OptimizerState& state,
                       const OptimizerConfig& cfg) {
  state.velocity.resize(w.size(), 0.0);
  ++state.step;
  for (std::size_t i = 0; i < w.size(); ++i) {
    state.velocity[i] = cfg.momentum * state.velocity[i] + g[i];
    w[i] -= cfg.learning_rate * state.velocity[i];
  }
}

void adamw_step(std::span<double> w, std::span<const double> g, OptimizerState& state,
                const OptimizerConfig& cfg) {
  state.m.resize(w.size(), 0.0);
  state.v.resize(w.size(), 0.0);
  const auto t = static_cast<double>(++state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < w.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    w[i] -= cfg.learning_rate * (m_hat / (std::sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * w[i]);
  }
}

void block_average(std::span<double> d, const SegmentTable& layout, std::size_t block_size) {
  if (block_size == 0) throw ConfigError("optimizer.block_size", "must be at least 1");
  if (d.size() != layout.total_size()) throw ShapeError("block_average: length does not match layout");
  for (const auto& seg : layout.segments()) {
    for (std::size_t start = 0; start < seg.size(); start += block_size) {
      const std::size_t end = std::min(start + block_size, seg.size());
      double sum = 0.0;
      for (std::size_t i = start; i < end; ++i) sum += std::abs(d[seg.offset + i]);
      const double mean = sum / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) d[seg.offset + i] = mean;
    }
  }
}

std::vector<double> adahessian_diagonal(const LinearOperator& hvp, const SegmentTable& layout,
                                        std::size_t probes, std::size_t block_size,
                                        std::uint64_t seed) {
  auto d = hutchinson_diagonal(hvp, layout.total_size(), probes, seed);
  block_average(d, layout, block_size);
  return d;
}

void adahessian_step(std::span<double> w, std::span<const double> g, std::span<const double> d,
                     OptimizerState& state, const OptimizerConfig& cfg) {
  state.m.resize(w.size(), 0.0);
  state.v.resize(w.size(), 0.0);
  state.hessian_diag.assign(d.begin(), d.end());
  const auto t = static_cast<double>(++state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < w.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * d[i] * d[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    const double denom = std::pow(std::sqrt(v_hat), cfg.hessian_power) + cfg.epsilon;
    w[i] -= cfg.learning_rate * (m_hat / denom + cfg.weight_decay * w[i]);
  }
}

Optimizer::Optimizer(OptimizerConfig config, const SegmentTable& layout, std::uint64_t seed)
    : config_(std::move(config)), layout_(layout), seed_(seed), frozen_(layout.total_size(), false) {
  config_.validate(&layout_);
  for (const auto& name : config_.frozen) {
    const auto& seg = layout_[*layout_.find(name)];
    std::fill_n(frozen_.begin() + static_cast<std::ptrdiff_t>(seg.offset), seg.size(), true);
  }
}

void Optimizer::step(ParameterVector& params, std::span<const double> grads,
                     const LinearOperator* hvp) {
  require_same_layout(layout_, params.layout());
  const std::size_t n = layout_.total_size();
  if (grads.size() != n) throw ShapeError("optimizer: gradient length does not match layout");
  for (double x : grads)
    if (!std::isfinite(x)) throw NumericalError("optimizer: gradient is not finite");

  std::vector<double> g(grads.begin(), grads.end());
  for (std::size_t i = 0; i < n; ++i)
    if (frozen_[i]) g[i] = 0.0;
  if (config_.clip_global_norm) clip_global_norm(g, *config_.clip_global_norm);

  std::vector<double> d;
  if (config_.kind == OptimizerKind::adahessian) {
    if (!hvp) throw Error("adahessian needs a Hessian-vector product");
    d = adahessian_diagonal(*hvp, layout_, config_.hutchinson_probes, config_.block_size,
                            derive_seed(seed_, state_.step));
    for (std::size_t i = 0; i < n; ++i) {
      if (frozen_[i]) d[i] = 0.0;
      if (!std::isfinite(d[i])) throw NumericalError("adahessian: Hessian diagonal is not finite");
    }
  }

  std::vector<double> kept;
  if (!config_.frozen.empty()) kept.assign(params.values().begin(), params.values().end());
  auto w = params.values();
  switch (config_.kind) {
    case OptimizerKind::sgd:
      sgd_step(w, g, config_);
      ++state_.step;
      break;
    case OptimizerKind::sgd_momentum: sgd_momentum_step(w, g, state_, config_); break;
    case OptimizerKind::adamw: adamw_step(w, g, state_, config_); break;
    case OptimizerKind::adahessian: adahessian_step(w, g, d, state_, config_); break;
  }
  if (!kept.empty())
    for (std::size_t i = 0; i < n; ++i)
      if (frozen_[i]) w[i] = kept[i];
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs", "must be at least 1");
  if (checkpoint_every == 0) throw ConfigError("train.checkpoint_every", "must be at least 1");
  if (past_plateau_factor && !(*past_plateau_factor > 0.0))
    throw ConfigError("train.past_plateau_factor", "must be positive");
}

std::vector<std::size_t> io_layer_segments(const Model& model) {
  const auto& layout = model.layout();
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layout.count(); ++i) {
    out.push_back(i);
    const auto& name = layout[i].name;
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) break;
  }
  for (const char* name : {"head.weight", "head.bias"})
    if (auto i = layout.find(name); i && std::find(out.begin(), out.end(), *i) == out.end())
      out.push_back(*i);
  return out;
}

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Checkpoint snapshot(std::int64_t epoch, const ParameterVector& params, const ParameterVector& buffers,
                    double train_acc, double gen_acc, double loss, const OptimizerConfig& opt,
                    const std::string& run_id, std::uint64_t seed) {
  return Checkpoint{epoch, params, buffers, train_acc, gen_acc, loss, opt.kind, run_id, seed};
}

// Running batchnorm statistics after one train-mode pass at `params`.
ParameterVector advance_buffers(const Model& model, const ParameterVector& params,
                                const ParameterVector& buffers, const Batch& b) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (std::size_t i = 0; i < params.layout().count(); ++i)
    vars.push_back(tape.constant(params.tensor(i)));
  ParameterVector next = buffers;
  model.forward(tape, vars, buffers, b.inputs, Mode::train, &next);
  return next;
}

}  // namespace

TrainResult train(const Model& model, ParameterVector params, ParameterVector buffers,
                  const SyntheticDataset& data, const OptimizerConfig& optimizer,
                  const TrainConfig& config, const std::string& run_id) {
  config.validate();
  require_same_layout(model.layout(), params.layout());
  require_same_layout(model.buffer_layout(), buffers.layout());
  const auto& spec = model.spec();
  data.train.validate(spec.input_dim, spec.classes);
  data.generalization.validate(spec.input_dim, spec.classes);

  std::vector<std::size_t> fresh;
  if (config.reinitialize_io_layers) fresh = io_layer_segments(model);
  for (const auto& name : config.reinitialize) {
    auto i = model.layout().find(name);
    if (!i) throw ConfigError("train.reinitialize", "no segment named '" + name + "'");
    if (std::find(fresh.begin(), fresh.end(), *i) == fresh.end()) fresh.push_back(*i);
  }
  if (!fresh.empty()) model.reinitialize(params, fresh, derive_seed(config.seed, 101));

  Optimizer opt(optimizer, model.layout(), derive_seed(config.seed, 102));
  const bool has_buffers = model.buffer_layout().count() > 0;
  const std::size_t n = data.train.size();
  const std::size_t batch = config.batch_size == 0 ? n : std::min(config.batch_size, n);

  TrainResult result;
  auto eval = [&](double& train_acc, double& gen_acc) {
    train_acc = model.accuracy(params, buffers, data.train);
    gen_acc = model.accuracy(params, buffers, data.generalization);
  };

  if (config.checkpoint_initial) {
    double ta = 0, ga = 0;
    eval(ta, ga);
    result.checkpoints.push_back(
        snapshot(0, params, buffers, ta, ga, loss_forward(model, params, data.train), optimizer,
                 run_id, config.seed));
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  ParameterVector grad;
  std::size_t last_epoch = config.epochs;
  for (std::size_t epoch = 1; epoch <= last_epoch; ++epoch) {
    if (batch < n) {
      Rng rng(derive_seed(config.seed, 1000 + epoch));
      rng.shuffle(order);
    }
    EpochMetrics m;
    m.epoch = static_cast<std::int64_t>(epoch);
    std::size_t steps = 0;
    try {
      for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t end = std::min(start + batch, n);
        Batch b = batch < n ? data.train.subset(std::span(order).subspan(start, end - start))
                            : data.train;
        ClassifierObjective obj(model, buffers, b, Mode::train);
        if (opt.needs_hvp()) {
          HvpOperator op(obj, params);
          m.train_loss += op.loss();
          m.grad_norm += norm2(op.grad());
          std::vector<double> g(op.grad().begin(), op.grad().end());
          auto linear = op.as_operator();
          if (has_buffers) buffers = advance_buffers(model, params, buffers, b);
          opt.step(params, g, &linear);
        } else {
          m.train_loss += value_and_gradient(obj, params, grad);
          m.grad_norm += norm2(grad.values());
          if (has_buffers) buffers = advance_buffers(model, params, buffers, b);
          opt.step(params, grad.values());
        }
        ++steps;
        if (!all_finite(params.values())) throw NumericalError("parameters became non-finite");
      }
    } catch (const NumericalError& e) {
      result.diverged = true;
      result.divergence_message = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    m.train_loss /= static_cast<double>(steps);
    m.grad_norm /= static_cast<double>(steps);
    eval(m.train_accuracy, m.generalization_accuracy);
    bool at_plateau = false;
    if (!result.plateau_epoch && m.train_accuracy == 1.0) {
      result.plateau_epoch = m.epoch;
      at_plateau = true;
      if (config.past_plateau_factor) {
        const auto extra = static_cast<std::size_t>(
            std::ceil(*config.past_plateau_factor * static_cast<double>(epoch)));
        last_epoch = std::min(config.epochs, epoch + extra);
      }
    }
    result.metrics.push_back(m);
    const bool milestone = config.past_plateau_factor && (at_plateau || epoch == last_epoch);
    if (epoch % config.checkpoint_every == 0 || milestone)
      result.checkpoints.push_back(snapshot(m.epoch, params, buffers, m.train_accuracy,
                                            m.generalization_accuracy, m.train_loss, optimizer,
                                            run_id, config.seed));
  }
  result.final_params = std::move(params);
  result.final_buffers = std::move(buffers);
  return result;
}

}  // namespace hesd
