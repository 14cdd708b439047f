#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "hesd/autodiff.hpp"
#include "hesd/parameters.hpp"

namespace hesd {

/// Symmetric linear map on a flat parameter space: out = A * in.
using LinearOperator = std::function<void(std::span<const double> in, std::span<double> out)>;

/// A scalar loss over a parameter layout.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual const SegmentTable& layout() const = 0;
  /// Records the loss on `tape` from one Var per segment.
  virtual ad::Var build_loss(ad::Tape& tape, std::span<const ad::Var> params) const = 0;
};

double loss_forward(const Objective& objective, const ParameterVector& params);
ParameterVector gradient(const Objective& objective, const ParameterVector& params);
/// Loss value, with the gradient written to `grad`.
double value_and_gradient(const Objective& objective, const ParameterVector& params,
                          ParameterVector& grad);
/// Exact Hessian-vector product obtained by differentiating <grad L, v>.
ParameterVector hvp(const Objective& objective, const ParameterVector& params,
                    const ParameterVector& v);

/// Hessian-vector products at a fixed point. The loss and its gradient graph
/// are recorded once; each apply() differentiates <grad, v> on top of them.
/// Not safe to share between threads; create one per thread.
class HvpOperator {
 public:
  HvpOperator(const Objective& objective, const ParameterVector& params);

  std::size_t dim() const { return layout_.total_size(); }
  double loss() const { return loss_; }
  std::span<const double> grad() const { return grad_; }
  void apply(std::span<const double> v, std::span<double> out);
  ParameterVector apply(const ParameterVector& v);
  /// Adapter usable wherever a LinearOperator is expected.
  LinearOperator as_operator();

 private:
  SegmentTable layout_;
  std::unique_ptr<ad::Tape> tape_;
  std::vector<ad::Var> params_;
  std::vector<ad::Var> grads_;
  std::vector<double> grad_;
  std::size_t mark_ = 0;
  double loss_ = 0.0;
};

/// L(w) = 1/2 w^T A w + b^T w over a single segment "w". A must be symmetric.
class QuadraticObjective : public Objective {
 public:
  QuadraticObjective(Tensor matrix, std::vector<double> linear = {});
  const SegmentTable& layout() const override { return layout_; }
  ad::Var build_loss(ad::Tape& tape, std::span<const ad::Var> params) const override;

 private:
  SegmentTable layout_;
  Tensor matrix_;
  Tensor linear_;
};

/// Dense Hessian built column by column from HVPs on basis vectors.
Tensor dense_hessian(const Objective& objective, const ParameterVector& params);

}  // namespace hesd
