#include "hesd/autodiff.hpp"

#include <cmath>
#include <string>

#include "hesd/error.hpp"

namespace hesd::ad {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) { return record(std::move(value), {}, nullptr); }

Var Tape::parameter(Tensor value) {
  Var v = record(std::move(value), {}, nullptr);
  nodes_[v.id].requires_grad = true;
  return v;
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardRule rule) {
  bool needs_grad = false;
  for (int i : inputs) needs_grad = needs_grad || nodes_[i].requires_grad;
  nodes_.push_back(Node{std::move(value), std::move(inputs), needs_grad ? std::move(rule) : nullptr,
                        needs_grad});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::truncate(std::size_t mark) {
  if (mark < nodes_.size()) nodes_.resize(mark);
}

std::vector<Var> Tape::gradient_graph(Var root, std::span<const Var> wrt) {
  if (root.tape != this) throw Error("gradient root belongs to another tape");
  if (root.value().size() != 1) throw ShapeError("gradient root must be a scalar");

  std::vector<Var> adjoint(static_cast<std::size_t>(root.id) + 1);
  adjoint[root.id] = constant(Tensor(root.shape(), 1.0));

  std::vector<bool> need;
  for (int id = root.id; id >= 0; --id) {
    if (!adjoint[id].valid()) continue;
    // std::deque keeps element references stable while the rule records nodes.
    const Node& node = nodes_[id];
    if (!node.requires_grad || !node.rule) continue;
    need.assign(node.inputs.size(), false);
    for (std::size_t i = 0; i < node.inputs.size(); ++i)
      need[i] = nodes_[node.inputs[i]].requires_grad;
    std::vector<Var> grads = node.rule(Var{this, id}, adjoint[id], need);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (!need[i] || !grads[i].valid()) continue;
      Var& slot = adjoint[node.inputs[i]];
      slot = slot.valid() ? add(slot, grads[i]) : grads[i];
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.tape != this) throw Error("gradient target belongs to another tape");
    if (w.id <= root.id && adjoint[w.id].valid())
      out.push_back(adjoint[w.id]);
    else
      out.push_back(constant(Tensor(w.shape(), 0.0)));
  }
  return out;
}

std::vector<Tensor> Tape::gradient(Var root, std::span<const Var> wrt) {
  const std::size_t mark = nodes_.size();
  std::vector<Var> grads = gradient_graph(root, wrt);
  std::vector<Tensor> out;
  out.reserve(grads.size());
  for (const Var& g : grads) out.push_back(g.value());
  truncate(mark);
  return out;
}

namespace {

Tape& tape_of(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw Error("operands live on different tapes");
  return *a.tape;
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

Var match_shape(Var g, const Shape& shape) {
  return g.shape() == shape ? g : reshape(g, shape);
}

void require_row(const char* op, Var a, Var row) {
  if (row.value().size() != a.value().cols())
    throw ShapeError(std::string(op) + ": row of " + shape_string(row.shape()) +
                     " cannot broadcast over " + shape_string(a.shape()));
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a, b);
  return t.record(zip(a.value(), b.value(), std::plus<>()), {a.id, b.id},
                  [](Var, Var g, const std::vector<bool>&) { return std::vector<Var>{g, g}; });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("sub", a, b);
  return t.record(zip(a.value(), b.value(), std::minus<>()), {a.id, b.id},
                  [](Var, Var g, const std::vector<bool>& need) {
                    return std::vector<Var>{g, need[1] ? neg(g) : Var{}};
                  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("mul", a, b);
  return t.record(zip(a.value(), b.value(), std::multiplies<>()), {a.id, b.id},
                  [a, b](Var, Var g, const std::vector<bool>& need) {
                    return std::vector<Var>{need[0] ? mul(g, b) : Var{}, need[1] ? mul(g, a) : Var{}};
                  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
  return a.tape->record(map(a.value(), [c](double x) { return c * x; }), {a.id},
                        [c](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{scale(g, c)};
                        });
}

Var add_scalar(Var a, double c) {
  return a.tape->record(map(a.value(), [c](double x) { return x + c; }), {a.id},
                        [](Var, Var g, const std::vector<bool>&) { return std::vector<Var>{g}; });
}

Var pow_scalar(Var a, double p) {
  return a.tape->record(map(a.value(), [p](double x) { return std::pow(x, p); }), {a.id},
                        [a, p](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{mul(g, scale(pow_scalar(a, p - 1.0), p))};
                        });
}

Var tanh(Var a) {
  return a.tape->record(map(a.value(), [](double x) { return std::tanh(x); }), {a.id},
                        [](Var y, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{mul(g, add_scalar(neg(mul(y, y)), 1.0))};
                        });
}

Var relu(Var a) {
  return a.tape->record(map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a.id},
                        [a](Var, Var g, const std::vector<bool>&) {
                          Var mask = a.tape->constant(
                              map(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
                          return std::vector<Var>{mul(g, mask)};
                        });
}

Var exp(Var a) {
  return a.tape->record(map(a.value(), [](double x) { return std::exp(x); }), {a.id},
                        [](Var y, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{mul(g, y)};
                        });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  require_row("add_row", a, row);
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  Tensor out(av.shape());
  const std::size_t n = av.rows(), k = av.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = av[i * k + j] + rv[j];
  return t.record(std::move(out), {a.id, row.id},
                  [row](Var, Var g, const std::vector<bool>& need) {
                    return std::vector<Var>{
                        g, need[1] ? match_shape(sum_rows(g), row.shape()) : Var{}};
                  });
}

Var mul_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  require_row("mul_row", a, row);
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  Tensor out(av.shape());
  const std::size_t n = av.rows(), k = av.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = av[i * k + j] * rv[j];
  return t.record(std::move(out), {a.id, row.id},
                  [a, row](Var, Var g, const std::vector<bool>& need) {
                    return std::vector<Var>{
                        need[0] ? mul_row(g, row) : Var{},
                        need[1] ? match_shape(sum_rows(mul(g, a)), row.shape()) : Var{}};
                  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
    throw ShapeError("matmul: incompatible shapes " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()));
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.values().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return t.record(std::move(out), {a.id, b.id},
                  [a, b](Var, Var g, const std::vector<bool>& need) {
                    return std::vector<Var>{need[0] ? matmul(g, transpose(b)) : Var{},
                                            need[1] ? matmul(transpose(a), g) : Var{}};
                  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), k = av.cols();
  Tensor out({k, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j * n + i] = av[i * k + j];
  return a.tape->record(std::move(out), {a.id},
                        [a](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{match_shape(transpose(g), a.shape())};
                        });
}

Var reshape(Var a, Shape shape) {
  Shape original = a.shape();
  return a.tape->record(a.value().reshaped(std::move(shape)), {a.id},
                        [original](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{reshape(g, original)};
                        });
}

Var sum_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), k = av.cols();
  Tensor out({1, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j] += av[i * k + j];
  return a.tape->record(std::move(out), {a.id},
                        [a, n](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{match_shape(broadcast_rows(g, n), a.shape())};
                        });
}

Var broadcast_rows(Var a, std::size_t n) {
  const Tensor& av = a.value();
  if (av.rows() != 1) throw ShapeError("broadcast_rows expects a single row");
  const std::size_t k = av.cols();
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = av[j];
  return a.tape->record(std::move(out), {a.id},
                        [a](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{match_shape(sum_rows(g), a.shape())};
                        });
}

Var sum_cols(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), k = av.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i] += av[i * k + j];
  return a.tape->record(std::move(out), {a.id},
                        [a, k](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{match_shape(broadcast_cols(g, k), a.shape())};
                        });
}

Var broadcast_cols(Var a, std::size_t k) {
  const Tensor& av = a.value();
  if (av.cols() != 1) throw ShapeError("broadcast_cols expects a single column");
  const std::size_t n = av.rows();
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = av[i];
  return a.tape->record(std::move(out), {a.id},
                        [a](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{match_shape(sum_cols(g), a.shape())};
                        });
}

Var sum_all(Var a) {
  double total = 0.0;
  for (double x : a.value().values()) total += x;
  return a.tape->record(Tensor::scalar(total), {a.id},
                        [a](Var, Var g, const std::vector<bool>&) {
                          const Tensor& av = a.value();
                          Var wide = broadcast_cols(broadcast_rows(g, av.rows()), av.cols());
                          return std::vector<Var>{match_shape(wide, a.shape())};
                        });
}

Var logsumexp_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), k = av.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double peak = av[i * k];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, av[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(av[i * k + j] - peak);
    out[i] = peak + std::log(s);
  }
  return a.tape->record(std::move(out), {a.id},
                        [a, k](Var self, Var g, const std::vector<bool>&) {
                          Var softmax = exp(sub(a, broadcast_cols(self, k)));
                          return std::vector<Var>{mul(broadcast_cols(g, k), softmax)};
                        });
}

Var gather(Var a, std::vector<long> index, Shape out_shape) {
  const Tensor& av = a.value();
  Tensor out(out_shape);
  if (index.size() != out.size()) throw ShapeError("gather: index length does not match output");
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= static_cast<long>(av.size())) throw ShapeError("gather: index out of range");
    out[i] = index[i] >= 0 ? av[static_cast<std::size_t>(index[i])] : 0.0;
  }
  Shape in_shape = av.shape();
  return a.tape->record(std::move(out), {a.id},
                        [index = std::move(index), in_shape](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{scatter_add(g, index, in_shape)};
                        });
}

Var scatter_add(Var a, std::vector<long> index, Shape out_shape) {
  const Tensor& av = a.value();
  Tensor out(out_shape);
  if (index.size() != av.size()) throw ShapeError("scatter_add: index length does not match input");
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= static_cast<long>(out.size()))
      throw ShapeError("scatter_add: index out of range");
    if (index[i] >= 0) out[static_cast<std::size_t>(index[i])] += av[i];
  }
  Shape in_shape = av.shape();
  return a.tape->record(std::move(out), {a.id},
                        [index = std::move(index), in_shape](Var, Var g, const std::vector<bool>&) {
                          return std::vector<Var>{gather(g, index, in_shape)};
                        });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  const std::size_t n = z.rows(), k = z.cols();
  if (labels.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  std::vector<long> picks(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                       std::to_string(k) + ")");
    picks[i] = static_cast<long>(i * k + static_cast<std::size_t>(labels[i]));
  }
  Var picked = gather(logits, std::move(picks), {n, 1});
  return scale(sum_all(sub(logsumexp_rows(logits), picked)), 1.0 / static_cast<double>(n));
}

}  // namespace hesd::ad
