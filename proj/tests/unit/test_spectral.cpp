#include <cmath>
#include <numeric>

#include "doctest.h"
#include "hesd/datasets.hpp"
#include "hesd/error.hpp"
#include "hesd/models.hpp"
#include "hesd/spectral.hpp"
#include "oracles.hpp"

using namespace hesd;
using namespace hesd::testing;

namespace {

struct ToyHessian {
  BuiltModel built;
  Batch batch;
};

ToyHessian toy_mlp(std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.train_samples = 32;
  cfg.input_dim = 4;
  cfg.classes = 3;
  cfg.seed = seed;
  return {build_model(ModelSpec::mlp({4, 12, 8, 3}, Activation::tanh), seed),
          make_dataset(cfg).train};
}

}  // namespace

TEST_CASE("lanczos on the identity stops after one step") {
  auto op = diagonal_operator({1, 1, 1, 1});
  std::vector<double> probe{0.3, -1.0, 2.0, 0.5};
  auto run = lanczos(op, probe, 3);
  CHECK(run.tridiagonal.early_stop);
  CHECK(run.tridiagonal.steps() == 1);
  CHECK(run.tridiagonal.alphas[0] == doctest::Approx(1.0));
  CHECK(run.tridiagonal.betas.empty());
  auto ritz = ritz_from_tridiagonal(run.tridiagonal);
  REQUIRE(ritz.size() == 1);
  CHECK(ritz.nodes[0] == doctest::Approx(1.0));
}

TEST_CASE("lanczos on diag(1,2) recovers both eigenvalues with equal weight") {
  auto op = diagonal_operator({1, 2});
  const double s = 1.0 / std::sqrt(2.0);
  auto run = lanczos(op, std::vector<double>{s, s}, 2);
  auto ritz = ritz_from_tridiagonal(run.tridiagonal);
  REQUIRE(ritz.size() == 2);
  CHECK(ritz.nodes[0] == doctest::Approx(1.0));
  CHECK(ritz.nodes[1] == doctest::Approx(2.0));
  CHECK(ritz.weights[0] == doctest::Approx(0.5));
  CHECK(ritz.weights[1] == doctest::Approx(0.5));
}

TEST_CASE("lanczos extremes match dense eigendecomposition on a 50x50 matrix") {
  auto m = random_symmetric(50, 4);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Rng rng(8);
  std::vector<double> probe(50);
  for (double& x : probe) x = rng.normal();
  auto run = lanczos(matrix_operator(m), probe, 50);
  auto ritz = ritz_from_tridiagonal(run.tridiagonal);
  CHECK(std::abs(ritz.min() - es.eigenvalues()(0)) <= 1e-6);
  CHECK(std::abs(ritz.max() - es.eigenvalues()(49)) <= 1e-6);

  // full reorthogonalization keeps the basis orthonormal
  const auto& q = run.basis;
  double worst = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j <= i; ++j)
      worst = std::max(worst, std::abs(dot(q[i], q[j]) - (i == j ? 1.0 : 0.0)));
  CHECK(worst < 1e-12);
}

TEST_CASE("lanczos rejects a zero probe") {
  auto op = diagonal_operator({1, 2});
  CHECK_THROWS_AS(lanczos(op, std::vector<double>{0, 0}, 2), Error);
}

TEST_CASE("ritz set of a 1x1 tridiagonal") {
  TridiagonalMatrix t;
  t.alphas = {3.0};
  auto ritz = ritz_from_tridiagonal(t);
  CHECK(ritz.nodes == std::vector<double>{3.0});
  CHECK(ritz.weights == std::vector<double>{1.0});
}

TEST_CASE("ritz weights are nonnegative and normalized over 100 seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto m = random_symmetric(40, 1000 + seed);
    Rng rng(seed);
    std::vector<double> probe(40);
    for (double& x : probe) x = rng.rademacher();
    auto ritz = ritz_from_tridiagonal(lanczos(matrix_operator(m), probe, 30).tridiagonal);
    double total = 0.0;
    for (double w : ritz.weights) {
      CHECK(w >= 0.0);
      total += w;
    }
    CHECK(std::abs(total - 1.0) <= 1e-10);
    CHECK(std::is_sorted(ritz.nodes.begin(), ritz.nodes.end()));
  }
}

TEST_CASE("power iteration on diagonal operators") {
  auto a = power_extreme(diagonal_operator({1, 2, 5}), 3, 1, 2000, 1e-10);
  CHECK(a.converged);
  CHECK(a.eigenvalue == doctest::Approx(5.0).epsilon(1e-8));

  auto b = power_extremes(diagonal_operator({-3, 1}), 2, 1, 2000, 1e-10);
  CHECK(b.dominant.eigenvalue == doctest::Approx(-3.0).epsilon(1e-8));
  CHECK(b.opposite.eigenvalue == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(b.min() == doctest::Approx(-3.0).epsilon(1e-8));
  CHECK(b.max() == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("power iteration flags non-convergence") {
  // equal-magnitude extremes never separate
  auto r = power_extreme(diagonal_operator({-2, 2}), 2, 3, 50, 1e-12);
  CHECK_FALSE(r.converged);
  CHECK(r.iterations == 50);
}

TEST_CASE("power iteration matches dense extremes on a toy MLP") {
  auto toy = toy_mlp(2);
  ClassifierObjective obj(toy.built.model, toy.built.buffers, toy.batch);
  auto eig = dense_eigenvalues(dense_hessian(obj, toy.built.params));
  HvpOperator op(obj, toy.built.params);
  auto bounds = power_extremes(op.as_operator(), op.dim(), 5, 3000, 1e-6);
  const double dense_min = eig(0), dense_max = eig(eig.size() - 1);
  CHECK(std::abs(bounds.max() - dense_max) <= 0.01 * std::abs(dense_max));
  CHECK(std::abs(bounds.min() - dense_min) <= 0.01 * std::abs(dense_min));
}

TEST_CASE("slq density of the identity is a single bump at 1") {
  SlqOptions opt;
  opt.probes = 3;
  opt.steps = 5;
  auto res = slq_density(diagonal_operator(std::vector<double>(20, 1.0)), 20, opt);
  CHECK(res.density.degenerate);
  const auto peak = std::max_element(res.density.density.begin(), res.density.density.end());
  const double at = res.density.grid[static_cast<std::size_t>(peak - res.density.density.begin())];
  CHECK(at == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(trapezoid(res.density.grid, res.density.density) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("slq density of diag(-1,1) is symmetric about zero") {
  SlqOptions opt;
  opt.probes = 4;
  opt.steps = 2;
  auto res = slq_density(diagonal_operator({-1, 1}), 2, opt);
  const auto& d = res.density;
  CHECK(d.grid.front() == doctest::Approx(-d.grid.back()));
  const std::size_t n = d.density.size();
  double worst = 0.0, peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    worst = std::max(worst, std::abs(d.density[i] - d.density[n - 1 - i]));
    peak = std::max(peak, d.density[i]);
  }
  CHECK(worst <= 1e-9 * peak);
}

TEST_CASE("slq invariants on a toy MLP") {
  auto toy = toy_mlp(3);
  ClassifierObjective obj(toy.built.model, toy.built.buffers, toy.batch);
  HvpOperator op(obj, toy.built.params);
  auto linear = op.as_operator();
  SlqOptions opt;
  opt.probes = 10;
  opt.steps = 64;
  opt.seed = 21;
  auto res = slq_density(linear, op.dim(), opt);

  SUBCASE("density is nonnegative with unit mass") {
    for (double x : res.density.density) CHECK(x >= 0.0);
    CHECK(std::abs(trapezoid(res.density.grid, res.density.density) - 1.0) <= 1e-3);
    CHECK(res.density.grid.size() >= 1024);
    const double sigma = 0.01 * (res.ritz.max() - res.ritz.min());
    CHECK(res.density.sigma == doctest::Approx(sigma));
    CHECK(res.density.grid.front() == doctest::Approx(res.ritz.min() - 3 * sigma));
    CHECK(res.density.grid.back() == doctest::Approx(res.ritz.max() + 3 * sigma));
  }

  SUBCASE("weights per probe sum to one") {
    std::vector<double> sums(opt.probes, 0.0);
    for (std::size_t i = 0; i < res.ritz.size(); ++i) sums[res.ritz.probe[i]] += res.ritz.weights[i];
    for (double s : sums) CHECK(std::abs(s - 1.0) <= 1e-10);
  }

  SUBCASE("quadrature reproduces the quadratic form of each probe") {
    // Lanczos identity: sum_i w_i lambda_i = q^T H q for the normalized probe
    double quad = 0.0;
    std::vector<double> hz(op.dim());
    for (std::size_t p = 0; p < opt.probes; ++p) {
      std::vector<double> z(op.dim());
      Rng rng(derive_seed(opt.seed, p));
      for (double& x : z) x = rng.rademacher();
      scale_in_place(1.0 / norm2(z), z);
      linear(z, hz);
      quad += dot(z, hz);
    }
    quad /= static_cast<double>(opt.probes);
    CHECK(std::abs(res.ritz.first_moment() - quad) <= 1e-10 * std::max(1.0, std::abs(quad)));
  }

  SUBCASE("ritz nodes interlace the dense spectrum") {
    auto eig = dense_eigenvalues(dense_hessian(obj, toy.built.params));
    const double lo = eig(0), hi = eig(eig.size() - 1);
    const double eps = 1e-6 * std::max(std::abs(lo), std::abs(hi));
    for (double x : res.ritz.nodes) {
      CHECK(x >= lo - eps);
      CHECK(x <= hi + eps);
    }
    CHECK(std::abs(res.ritz.max() - hi) <= 0.01 * std::abs(hi));
    CHECK(std::abs(res.ritz.min() - lo) <= 0.01 * std::abs(lo));
  }

  SUBCASE("fixed seed gives bit-identical output") {
    auto again = slq_density(linear, op.dim(), opt);
    CHECK(again.ritz.nodes == res.ritz.nodes);
    CHECK(again.ritz.weights == res.ritz.weights);
    CHECK(again.density.density == res.density.density);
  }
}

TEST_CASE("slq first moment agrees with the Hutchinson trace estimate") {
  auto toy = toy_mlp(4);
  ClassifierObjective obj(toy.built.model, toy.built.buffers, toy.batch);
  HvpOperator op(obj, toy.built.params);
  auto linear = op.as_operator();
  const auto n = static_cast<double>(op.dim());

  SUBCASE("same ten probes") {
    SlqOptions opt;
    opt.seed = 77;
    auto res = slq_density(linear, op.dim(), opt);
    const double hutch = hutchinson_trace(linear, op.dim(), opt.probes, opt.seed) / n;
    CHECK(std::abs(res.ritz.first_moment() - hutch) <= 0.05 * std::abs(hutch));
  }

  SUBCASE("many probes against the exact trace") {
    // Rademacher Hutchinson variance per probe is 2 * sum_{i != j} H_ij^2;
    // allow four standard errors of the probe average
    Tensor h = dense_hessian(obj, toy.built.params);
    double trace = 0.0, off = 0.0;
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (std::size_t j = 0; j < h.cols(); ++j) {
        if (i == j) trace += h.at(i, i);
        else off += h.at(i, j) * h.at(i, j);
      }
    SlqOptions opt;
    opt.seed = 5;
    opt.probes = 400;
    opt.steps = 8;
    auto res = slq_density(linear, op.dim(), opt);
    const double stderr_ = std::sqrt(2.0 * off / static_cast<double>(opt.probes)) / n;
    CHECK(std::abs(res.ritz.first_moment() - trace / n) <= 4.0 * stderr_);
  }
}

TEST_CASE("hutchinson diagonal of a diagonal operator is exact") {
  auto d = hutchinson_diagonal(diagonal_operator({1, 4, -2}), 3, 7, 0);
  CHECK(d[0] == doctest::Approx(1.0));
  CHECK(d[1] == doctest::Approx(4.0));
  CHECK(d[2] == doctest::Approx(-2.0));
}
