#pragma once

// Spectral estimates of a symmetric operator available only through
// matrix-vector products: extreme eigenvalues by power iteration, Ritz
// nodes and Gauss quadrature weights by Lanczos, and a smoothed spectral
// density averaged over random probes (stochastic Lanczos quadrature).

#include <cstdint>
#include <span>
#include <vector>

#include "hesd/objective.hpp"

namespace hesd {

struct TridiagonalMatrix {
  std::vector<double> alphas;  // diagonal, length m
  std::vector<double> betas;   // off-diagonal, length m - 1
  std::size_t requested_steps = 0;
  bool early_stop = false;

  std::size_t steps() const { return alphas.size(); }
};

struct LanczosResult {
  TridiagonalMatrix tridiagonal;
  std::vector<std::vector<double>> basis;  // orthonormal Lanczos vectors
};

/// Lanczos tridiagonalization started from `probe`, with full
/// reorthogonalization against every previous basis vector (two
/// Gram-Schmidt passes). Stops early when the next off-diagonal falls below
/// `beta_tol` relative to the norm of the current operator image.
LanczosResult lanczos(const LinearOperator& op, std::span<const double> probe, std::size_t steps,
                      double beta_tol = 1e-12);

/// Eigenvalues and Gauss quadrature weights; nodes sorted ascending.
struct RitzSet {
  std::vector<double> nodes;
  std::vector<double> weights;
  std::vector<std::size_t> probe;  // probe index of each node
  std::size_t probe_count = 0;

  std::size_t size() const { return nodes.size(); }
  bool empty() const { return nodes.empty(); }
  double min() const { return nodes.front(); }
  double max() const { return nodes.back(); }
  /// Average over probes of sum_i w_i * lambda_i.
  double first_moment() const;
  /// Merges fragments from separate probes, keeping nodes sorted.
  static RitzSet merge(std::span<const RitzSet> fragments);
  RitzSet scaled(double c) const;
};

/// Nodes are the eigenvalues of T, weights the squared first components of
/// its normalized eigenvectors.
RitzSet ritz_from_tridiagonal(const TridiagonalMatrix& t, std::size_t probe_index = 0);

struct PowerResult {
  double eigenvalue = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  double residual = 0.0;  // ||Hv - lambda v|| / ||lambda v||
};

/// Dominant eigenvalue (largest magnitude) of op - shift * I, reported for
/// op itself (the shift is added back).
PowerResult power_extreme(const LinearOperator& op, std::size_t dim, std::uint64_t seed,
                          std::size_t max_iters = 500, double tol = 1e-5, double shift = 0.0);

struct SpectrumBounds {
  PowerResult dominant;
  PowerResult opposite;  // from the pass on op - dominant * I
  double min() const;
  double max() const;
};

/// Both ends of the spectrum: a plain pass followed by a shifted pass.
SpectrumBounds power_extremes(const LinearOperator& op, std::size_t dim, std::uint64_t seed,
                              std::size_t max_iters = 500, double tol = 1e-5);

struct SlqOptions {
  std::size_t probes = 10;
  std::size_t steps = 64;
  double sigma_factor = 0.01;
  std::uint64_t seed = 0;
  std::size_t grid_points = 1024;
};

struct SpectralDensity {
  std::vector<double> grid;
  std::vector<double> density;
  double sigma = 0.0;
  std::size_t probes = 0;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  double lambda_min = 0.0;
  double lambda_max = 0.0;
  /// Spectrum span below 1e-12: a single spike was emitted.
  bool degenerate = false;
};

/// Gaussian-smoothed density of a Ritz set: each probe contributes
/// sum_i w_i N(t; lambda_i, sigma^2), averaged over probes, on a uniform grid
/// over [lambda_min - 3 sigma, lambda_max + 3 sigma], normalized to unit
/// trapezoidal mass.
SpectralDensity density_from_ritz(const RitzSet& ritz, double sigma_factor,
                                  std::size_t grid_points = 1024);

struct SlqResult {
  SpectralDensity density;
  RitzSet ritz;
  std::vector<TridiagonalMatrix> tridiagonals;
};

/// Rademacher probes (normalized), one Lanczos run each, probes processed in
/// index order.
SlqResult slq_density(const LinearOperator& op, std::size_t dim, const SlqOptions& options);

double trapezoid(std::span<const double> x, std::span<const double> y);

/// Hutchinson estimate of the trace from `probes` Rademacher vectors.
double hutchinson_trace(const LinearOperator& op, std::size_t dim, std::size_t probes,
                        std::uint64_t seed);
/// Hutchinson estimate of the diagonal: mean of z * (Hz).
std::vector<double> hutchinson_diagonal(const LinearOperator& op, std::size_t dim,
                                        std::size_t probes, std::uint64_t seed);

}  // namespace hesd
