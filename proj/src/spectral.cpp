#include "hesd/spectral.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <tuple>

#include "hesd/error.hpp"
#include "hesd/rng.hpp"

namespace hesd {

namespace {

std::vector<double> rademacher(std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> z(dim);
  for (double& x : z) x = rng.rademacher();
  return z;
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericalError(std::string(what) + " produced a non-finite value");
}

}  // namespace

LanczosResult lanczos(const LinearOperator& op, std::span<const double> probe, std::size_t steps,
                      double beta_tol) {
  if (steps == 0) throw Error("lanczos: need at least one step");
  const double probe_norm = norm2(probe);
  if (!(probe_norm > 0.0)) throw Error("lanczos: probe vector is zero");
  const std::size_t n = probe.size();

  LanczosResult out;
  auto& t = out.tridiagonal;
  t.requested_steps = steps;
  std::vector<double> q(probe.begin(), probe.end());
  scale_in_place(1.0 / probe_norm, q);
  std::vector<double> w(n);

  for (std::size_t j = 0; j < steps; ++j) {
    out.basis.push_back(q);
    op(q, w);
    require_finite(w, "operator");
    const double image_norm = norm2(w);
    const double alpha = dot(q, w);
    t.alphas.push_back(alpha);
    if (j + 1 == steps) break;

    axpy(-alpha, q, w);
    if (j > 0) axpy(-t.betas.back(), out.basis[j - 1], w);
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : out.basis) axpy(-dot(b, w), b, w);

    const double beta = norm2(w);
    if (beta <= beta_tol * image_norm || image_norm == 0.0 || out.basis.size() == n) {
      t.early_stop = true;
      break;
    }
    t.betas.push_back(beta);
    for (std::size_t i = 0; i < n; ++i) q[i] = w[i] / beta;
  }
  return out;
}

double RitzSet::first_moment() const {
  if (probe_count == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * nodes[i];
  return s / static_cast<double>(probe_count);
}

RitzSet RitzSet::merge(std::span<const RitzSet> fragments) {
  std::vector<std::tuple<double, double, std::size_t>> all;
  RitzSet out;
  for (const auto& f : fragments) {
    for (std::size_t i = 0; i < f.size(); ++i) all.emplace_back(f.nodes[i], f.weights[i], f.probe[i]);
    out.probe_count += f.probe_count;
  }
  // stable on ties so merged order is a function of the inputs alone
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& a, const auto& b) { return std::get<0>(a) < std::get<0>(b); });
  for (const auto& [node, weight, probe] : all) {
    out.nodes.push_back(node);
    out.weights.push_back(weight);
    out.probe.push_back(probe);
  }
  return out;
}

RitzSet RitzSet::scaled(double c) const {
  RitzSet out = *this;
  for (double& x : out.nodes) x *= c;
  if (c < 0) {
    std::reverse(out.nodes.begin(), out.nodes.end());
    std::reverse(out.weights.begin(), out.weights.end());
    std::reverse(out.probe.begin(), out.probe.end());
  }
  return out;
}

RitzSet ritz_from_tridiagonal(const TridiagonalMatrix& t, std::size_t probe_index) {
  const auto m = static_cast<Eigen::Index>(t.steps());
  if (m == 0) throw Error("ritz_from_tridiagonal: empty matrix");
  if (t.betas.size() + 1 != t.alphas.size())
    throw ShapeError("tridiagonal matrix needs m - 1 off-diagonal entries");

  Eigen::VectorXd diag = Eigen::Map<const Eigen::VectorXd>(t.alphas.data(), m);
  Eigen::VectorXd sub(std::max<Eigen::Index>(m - 1, 0));
  for (Eigen::Index i = 0; i + 1 < m; ++i) sub(i) = t.betas[static_cast<std::size_t>(i)];

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success)
    throw NumericalError("tridiagonal eigensolver did not converge");

  RitzSet out;
  out.probe_count = 1;
  double total = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double first = solver.eigenvectors()(0, i);
    out.nodes.push_back(solver.eigenvalues()(i));
    out.weights.push_back(first * first);
    out.probe.push_back(probe_index);
    total += first * first;
  }
  // eigenvectors are unit norm, so total is 1 up to rounding
  for (double& w : out.weights) w /= total;
  return out;
}

PowerResult power_extreme(const LinearOperator& op, std::size_t dim, std::uint64_t seed,
                          std::size_t max_iters, double tol, double shift) {
  if (dim == 0) throw Error("power_extreme: empty operator");
  Rng rng(seed);
  std::vector<double> v(dim), w(dim);
  for (double& x : v) x = rng.normal();
  scale_in_place(1.0 / norm2(v), v);

  PowerResult best;
  best.residual = std::numeric_limits<double>::infinity();
  for (std::size_t it = 1; it <= max_iters; ++it) {
    op(v, w);
    require_finite(w, "operator");
    if (shift != 0.0) axpy(-shift, v, w);
    const double lambda = dot(v, w);
    double r = 0.0;
    for (std::size_t i = 0; i < dim; ++i) r += (w[i] - lambda * v[i]) * (w[i] - lambda * v[i]);
    const double residual =
        lambda != 0.0 ? std::sqrt(r) / std::abs(lambda) : std::numeric_limits<double>::infinity();
    if (residual < best.residual || it == 1) {
      best.eigenvalue = lambda + shift;
      best.residual = residual;
    }
    best.iterations = it;
    if (residual <= tol) {
      best.eigenvalue = lambda + shift;
      best.residual = residual;
      best.converged = true;
      break;
    }
    const double wn = norm2(w);
    if (wn == 0.0) {
      // v lies in the null space of the shifted operator
      best.eigenvalue = shift;
      best.residual = 0.0;
      best.converged = true;
      break;
    }
    for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / wn;
  }
  return best;
}

double SpectrumBounds::min() const { return std::min(dominant.eigenvalue, opposite.eigenvalue); }
double SpectrumBounds::max() const { return std::max(dominant.eigenvalue, opposite.eigenvalue); }

SpectrumBounds power_extremes(const LinearOperator& op, std::size_t dim, std::uint64_t seed,
                              std::size_t max_iters, double tol) {
  SpectrumBounds b;
  b.dominant = power_extreme(op, dim, derive_seed(seed, 0), max_iters, tol, 0.0);
  b.opposite = power_extreme(op, dim, derive_seed(seed, 1), max_iters, tol, b.dominant.eigenvalue);
  return b;
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return s;
}

SpectralDensity density_from_ritz(const RitzSet& ritz, double sigma_factor,
                                  std::size_t grid_points) {
  if (ritz.empty()) throw Error("density_from_ritz: empty Ritz set");
  if (!(sigma_factor > 0.0)) throw ConfigError("sigma_factor", "must be positive");
  if (grid_points < 2) throw ConfigError("grid_points", "need at least 2 grid points");

  SpectralDensity d;
  d.lambda_min = ritz.min();
  d.lambda_max = ritz.max();
  const double span = d.lambda_max - d.lambda_min;
  if (span < 1e-12) {
    d.degenerate = true;
    d.sigma = sigma_factor * std::max(std::abs(d.lambda_max), 1e-12);
  } else {
    d.sigma = sigma_factor * span;
  }

  const double lo = d.lambda_min - 3 * d.sigma;
  const double hi = d.lambda_max + 3 * d.sigma;
  d.grid.resize(grid_points);
  for (std::size_t i = 0; i < grid_points; ++i)
    d.grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(grid_points - 1);

  d.density.assign(grid_points, 0.0);
  const double norm = 1.0 / (d.sigma * std::sqrt(2 * std::numbers::pi) *
                             static_cast<double>(std::max<std::size_t>(ritz.probe_count, 1)));
  for (std::size_t i = 0; i < ritz.size(); ++i) {
    const double mu = ritz.nodes[i];
    const double w = ritz.weights[i] * norm;
    for (std::size_t g = 0; g < grid_points; ++g) {
      const double z = (d.grid[g] - mu) / d.sigma;
      d.density[g] += w * std::exp(-0.5 * z * z);
    }
  }
  // tails beyond +-3 sigma are cut by the grid; renormalize what remains
  const double mass = trapezoid(d.grid, d.density);
  if (mass > 0.0)
    for (double& x : d.density) x /= mass;
  return d;
}

SlqResult slq_density(const LinearOperator& op, std::size_t dim, const SlqOptions& options) {
  if (options.probes == 0) throw ConfigError("probes", "need at least one probe");
  if (options.steps == 0) throw ConfigError("steps", "need at least one Lanczos step");
  SlqResult out;
  std::vector<RitzSet> fragments;
  for (std::size_t p = 0; p < options.probes; ++p) {
    auto z = rademacher(dim, derive_seed(options.seed, p));
    auto run = lanczos(op, z, options.steps);
    fragments.push_back(ritz_from_tridiagonal(run.tridiagonal, p));
    out.tridiagonals.push_back(std::move(run.tridiagonal));
  }
  out.ritz = RitzSet::merge(fragments);
  out.density = density_from_ritz(out.ritz, options.sigma_factor, options.grid_points);
  out.density.probes = options.probes;
  out.density.steps = options.steps;
  out.density.seed = options.seed;
  return out;
}

double hutchinson_trace(const LinearOperator& op, std::size_t dim, std::size_t probes,
                        std::uint64_t seed) {
  if (probes == 0) throw ConfigError("probes", "need at least one probe");
  std::vector<double> hz(dim);
  double total = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    auto z = rademacher(dim, derive_seed(seed, p));
    op(z, hz);
    total += dot(z, hz);
  }
  return total / static_cast<double>(probes);
}

std::vector<double> hutchinson_diagonal(const LinearOperator& op, std::size_t dim,
                                        std::size_t probes, std::uint64_t seed) {
  if (probes == 0) throw ConfigError("probes", "need at least one probe");
  std::vector<double> diag(dim, 0.0), hz(dim);
  for (std::size_t p = 0; p < probes; ++p) {
    auto z = rademacher(dim, derive_seed(seed, p));
    op(z, hz);
    for (std::size_t i = 0; i < dim; ++i) diag[i] += z[i] * hz[i];
  }
  scale_in_place(1.0 / static_cast<double>(probes), diag);
  return diag;
}

}  // namespace hesd
