#include "hesd/objective.hpp"

#include <cmath>

#include "hesd/error.hpp"

namespace hesd {

namespace {

std::vector<ad::Var> bind_parameters(ad::Tape& tape, const ParameterVector& params) {
  std::vector<ad::Var> vars;
  vars.reserve(params.layout().count());
  for (std::size_t i = 0; i < params.layout().count(); ++i)
    vars.push_back(tape.parameter(params.tensor(i)));
  return vars;
}

double scalar_value(ad::Var v) {
  const double x = v.value()[0];
  if (!std::isfinite(x)) throw NumericalError("loss is not finite");
  return x;
}

std::vector<double> concat(std::span<const ad::Var> parts, std::size_t total) {
  std::vector<double> flat;
  flat.reserve(total);
  for (const ad::Var& p : parts) {
    auto v = p.value().values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

}  // namespace

double loss_forward(const Objective& objective, const ParameterVector& params) {
  require_same_layout(objective.layout(), params.layout());
  ad::Tape tape;
  auto vars = bind_parameters(tape, params);
  return scalar_value(objective.build_loss(tape, vars));
}

double value_and_gradient(const Objective& objective, const ParameterVector& params,
                          ParameterVector& grad) {
  require_same_layout(objective.layout(), params.layout());
  ad::Tape tape;
  auto vars = bind_parameters(tape, params);
  ad::Var loss = objective.build_loss(tape, vars);
  const double value = scalar_value(loss);
  auto grads = tape.gradient(loss, vars);
  std::vector<Tensor> parts(grads.begin(), grads.end());
  grad = flatten(params.layout(), parts);
  for (double g : grad.values())
    if (!std::isfinite(g)) throw NumericalError("gradient is not finite");
  return value;
}

ParameterVector gradient(const Objective& objective, const ParameterVector& params) {
  ParameterVector out;
  value_and_gradient(objective, params, out);
  return out;
}

ParameterVector hvp(const Objective& objective, const ParameterVector& params,
                    const ParameterVector& v) {
  HvpOperator op(objective, params);
  return op.apply(v);
}

HvpOperator::HvpOperator(const Objective& objective, const ParameterVector& params)
    : layout_(params.layout()), tape_(std::make_unique<ad::Tape>()) {
  require_same_layout(objective.layout(), params.layout());
  params_ = bind_parameters(*tape_, params);
  ad::Var loss = objective.build_loss(*tape_, params_);
  loss_ = scalar_value(loss);
  grads_ = tape_->gradient_graph(loss, params_);
  grad_ = concat(grads_, dim());
  for (double g : grad_)
    if (!std::isfinite(g)) throw NumericalError("gradient is not finite");
  mark_ = tape_->size();
}

void HvpOperator::apply(std::span<const double> v, std::span<double> out) {
  if (v.size() != dim() || out.size() != dim())
    throw ShapeError("hvp: vector length " + std::to_string(v.size()) + ", expected " +
                     std::to_string(dim()));
  ad::Var inner;
  for (std::size_t i = 0; i < layout_.count(); ++i) {
    const Segment& s = layout_[i];
    Tensor part(s.shape, std::vector<double>(v.begin() + static_cast<long>(s.offset),
                                             v.begin() + static_cast<long>(s.offset + s.size())));
    ad::Var term = ad::sum_all(ad::mul(grads_[i], tape_->constant(std::move(part))));
    inner = inner.valid() ? ad::add(inner, term) : term;
  }
  auto hv = tape_->gradient(inner, params_);
  std::size_t k = 0;
  for (const Tensor& part : hv)
    for (double x : part.values()) {
      if (!std::isfinite(x)) {
        tape_->truncate(mark_);
        throw NumericalError("Hessian-vector product is not finite");
      }
      out[k++] = x;
    }
  tape_->truncate(mark_);
}

ParameterVector HvpOperator::apply(const ParameterVector& v) {
  require_same_layout(layout_, v.layout());
  ParameterVector out = ParameterVector::zeros(layout_);
  apply(v.values(), out.values());
  return out;
}

LinearOperator HvpOperator::as_operator() {
  return [this](std::span<const double> in, std::span<double> out) { apply(in, out); };
}

QuadraticObjective::QuadraticObjective(Tensor matrix, std::vector<double> linear)
    : matrix_(std::move(matrix)) {
  const std::size_t n = matrix_.rows();
  if (matrix_.rank() != 2 || matrix_.cols() != n)
    throw ShapeError("quadratic objective needs a square matrix");
  if (linear.empty()) linear.assign(n, 0.0);
  if (linear.size() != n) throw ShapeError("linear term length does not match matrix");
  linear_ = Tensor({1, n}, std::move(linear));
  layout_ = SegmentTable({{"w", {n}}});
}

ad::Var QuadraticObjective::build_loss(ad::Tape& tape, std::span<const ad::Var> params) const {
  const std::size_t n = matrix_.rows();
  ad::Var w = ad::reshape(params[0], {1, n});
  ad::Var aw = ad::matmul(w, tape.constant(matrix_));
  ad::Var quad = ad::scale(ad::sum_all(ad::mul(aw, w)), 0.5);
  return ad::add(quad, ad::sum_all(ad::mul(w, tape.constant(linear_))));
}

Tensor dense_hessian(const Objective& objective, const ParameterVector& params) {
  HvpOperator op(objective, params);
  const std::size_t n = op.dim();
  Tensor h({n, n});
  std::vector<double> e(n, 0.0), col(n);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    op.apply(e, col);
    e[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i) h.at(i, j) = col[i];
  }
  return h;
}

}  // namespace hesd
