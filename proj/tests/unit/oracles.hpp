#pragma once

// Independent reference computations used by the tests. Nothing here goes
// through the reverse-mode backward rules it is meant to check, except the
// HVP oracle, which differences first-order gradients.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "hesd/objective.hpp"
#include "hesd/rng.hpp"

namespace hesd::testing {

/// Central differences of the loss, one coordinate at a time.
inline std::vector<double> fd_gradient(const Objective& obj, const ParameterVector& params,
                                       double h = 1e-5) {
  std::vector<double> g(params.size());
  ParameterVector w = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double x = w[i];
    w[i] = x + h;
    const double up = loss_forward(obj, w);
    w[i] = x - h;
    const double down = loss_forward(obj, w);
    w[i] = x;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// (grad L(w + eps v) - grad L(w - eps v)) / (2 eps)
inline std::vector<double> fd_hvp(const Objective& obj, const ParameterVector& params,
                                  std::span<const double> v, double eps = 1e-4) {
  ParameterVector up = params, down = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    up[i] += eps * v[i];
    down[i] -= eps * v[i];
  }
  auto gu = gradient(obj, up);
  auto gd = gradient(obj, down);
  std::vector<double> out(params.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gu[i] - gd[i]) / (2 * eps);
  return out;
}

inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-300);
}

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

/// Eigenvalues (ascending) of the symmetrized dense matrix.
inline Eigen::VectorXd dense_eigenvalues(const Tensor& h) {
  Eigen::MatrixXd m = to_eigen(h);
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

}  // namespace hesd::testing

namespace hesd::testing {

inline LinearOperator matrix_operator(Eigen::MatrixXd m) {
  return [m = std::move(m)](std::span<const double> in, std::span<double> out) {
    Eigen::Map<const Eigen::VectorXd> x(in.data(), static_cast<Eigen::Index>(in.size()));
    Eigen::Map<Eigen::VectorXd> y(out.data(), static_cast<Eigen::Index>(out.size()));
    y = m * x;
  };
}

inline LinearOperator diagonal_operator(std::vector<double> d) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d.size()),
                                            static_cast<Eigen::Index>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = d[i];
  return matrix_operator(m);
}

inline Eigen::MatrixXd random_symmetric(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.normal();
  return 0.5 * (a + a.transpose());
}

}  // namespace hesd::testing
