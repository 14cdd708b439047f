#pragma once

// Reverse-mode differentiation on a recording tape. Every backward rule is
// itself written in terms of recorded operations, so the result of a
// backward pass is again a differentiable expression; differentiating it a
// second time yields exact second-order quantities (Hessian-vector
// products).

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "hesd/tensor.hpp"

namespace hesd::ad {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Computes the adjoints of a node's inputs from the adjoint of its output.
/// `need[i]` is false when input i does not require a gradient; the rule may
/// return an invalid Var for it.
using BackwardRule =
    std::function<std::vector<Var>(Var self, Var grad, const std::vector<bool>& need)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  Var record(Tensor value, std::vector<int> inputs, BackwardRule rule);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Drops every node recorded after the first `mark` nodes.
  void truncate(std::size_t mark);

  /// Adjoints of a scalar `root` with respect to `wrt`, as recorded
  /// expressions. Inputs that `root` does not depend on get a zero constant.
  std::vector<Var> gradient_graph(Var root, std::span<const Var> wrt);

  /// Same as gradient_graph but returns values and discards the recorded
  /// backward nodes.
  std::vector<Tensor> gradient(Var root, std::span<const Var> wrt);

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardRule rule;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;
};

// Elementwise and structural operations. Binary operations require equal
// shapes unless stated otherwise.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var pow_scalar(Var a, double p);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);

/// (n x k) + (1 x k) row broadcast.
Var add_row(Var a, Var row);
/// (n x k) * (1 x k) row broadcast.
Var mul_row(Var a, Var row);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

/// Sums over rows: (n x k) -> (1 x k).
Var sum_rows(Var a);
/// (1 x k) -> (n x k).
Var broadcast_rows(Var a, std::size_t n);
/// Sums over columns: (n x k) -> (n x 1).
Var sum_cols(Var a);
/// (n x 1) -> (n x k).
Var broadcast_cols(Var a, std::size_t k);
/// Sum of every entry as a 1 x 1 tensor.
Var sum_all(Var a);

/// Row-wise log-sum-exp: (n x k) -> (n x 1).
Var logsumexp_rows(Var a);

/// out[i] = a[index[i]] (flat indexing), or 0 where index[i] < 0.
Var gather(Var a, std::vector<long> index, Shape out_shape);
/// Adjoint of gather: out[index[i]] += a[i].
Var scatter_add(Var a, std::vector<long> index, Shape out_shape);

/// Mean softmax cross-entropy of logits (n x k) against class labels.
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace hesd::ad
