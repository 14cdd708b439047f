#include <cmath>

#include "doctest.h"
#include "hesd/datasets.hpp"
#include "hesd/error.hpp"
#include "hesd/models.hpp"
#include "hesd/rng.hpp"
#include "oracles.hpp"

using namespace hesd;
using hesd::testing::fd_gradient;
using hesd::testing::fd_hvp;
using hesd::testing::relative_error;

namespace {

Tensor diag(std::vector<double> d) {
  const std::size_t n = d.size();
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = d[i];
  return m;
}

ParameterVector vec(const SegmentTable& layout, std::vector<double> v) {
  return ParameterVector(layout, std::move(v));
}

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// The 8-sample batch behind the pinned regression value below.
Batch fixed_batch() {
  DatasetConfig cfg;
  cfg.train_samples = 8;
  cfg.generalization_samples = 8;
  cfg.input_dim = 4;
  cfg.classes = 3;
  cfg.seed = 0;
  return make_dataset(cfg).train;
}

struct ToyCase {
  const char* name;
  ModelSpec spec;
};

std::vector<ToyCase> toy_models() {
  ModelSpec tanh_mlp = ModelSpec::mlp({4, 8, 6, 3}, Activation::tanh);
  ModelSpec relu_mlp = ModelSpec::mlp({4, 10, 3}, Activation::relu);
  ModelSpec conv;
  conv.kind = ModelKind::convnet;
  conv.hidden = {6};
  conv.activation = Activation::tanh;
  ModelSpec wide;
  wide.kind = ModelKind::wide_dense;
  wide.wide_width = 16;
  wide.hidden = {5};
  wide.activation = Activation::tanh;
  ModelSpec bn = ModelSpec::mlp({4, 8, 3}, Activation::tanh);
  bn.use_batchnorm = true;
  return {{"tanh-mlp", tanh_mlp}, {"relu-mlp", relu_mlp}, {"convnet", conv},
          {"wide-dense", wide}, {"batchnorm-mlp", bn}};
}

}  // namespace

TEST_CASE("loss of uniform logits is ln 2") {
  ModelSpec spec = ModelSpec::mlp({3, 4, 2});
  auto built = build_model(spec, 1);
  ParameterVector zeros = ParameterVector::zeros(built.model.layout());
  DatasetConfig cfg;
  cfg.input_dim = 3;
  cfg.classes = 2;
  cfg.train_samples = 10;
  Batch batch = make_dataset(cfg).train;
  CHECK(loss_forward(built.model, zeros, batch) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("saturated softmax drives the loss to zero") {
  ad::Tape tape;
  std::vector<int> labels{0};
  double previous = 1.0;
  for (double margin : {5.0, 20.0, 100.0}) {
    ad::Var logits = tape.constant(Tensor({1, 2}, std::vector<double>{margin, 0.0}));
    const double loss = ad::cross_entropy(logits, labels).value()[0];
    CHECK(loss < previous);
    previous = loss;
  }
  CHECK(previous < 1e-40);
}

TEST_CASE("loss regression value for the seed-0 toy MLP") {
  auto built = build_model(ModelSpec::mlp({4, 8, 3}, Activation::tanh), 0);
  const double loss = loss_forward(built.model, built.params, fixed_batch());
  // pinned from the first run, cross-checked against an independent numpy forward pass
  CHECK(loss == doctest::Approx(0.89621681348889382).epsilon(1e-12));
}

TEST_CASE("quadratic objective gradient and HVP") {
  QuadraticObjective quad(diag({1.0, 2.0}));
  auto w = vec(quad.layout(), {1.0, 1.0});
  auto g = gradient(quad, w);
  CHECK(g[0] == doctest::Approx(1.0));
  CHECK(g[1] == doctest::Approx(2.0));

  auto hv = hvp(quad, w, vec(quad.layout(), {1.0, 0.0}));
  CHECK(hv[0] == doctest::Approx(1.0));
  CHECK(hv[1] == doctest::Approx(0.0));

  auto zero = hvp(quad, w, ParameterVector::zeros(quad.layout()));
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);
}

TEST_CASE("gradient vanishes at the minimum of a shifted quadratic") {
  // L = 1/2 w^T A w + b^T w, minimum at w* = -A^{-1} b
  QuadraticObjective quad(diag({1.0, 2.0}), {-3.0, 4.0});
  auto g = gradient(quad, vec(quad.layout(), {3.0, -2.0}));
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
}

TEST_CASE("gradient matches central finite differences") {
  const Batch batch = fixed_batch();
  for (const auto& tc : toy_models()) {
    CAPTURE(tc.name);
    auto built = build_model(tc.spec, 3);
    ClassifierObjective obj(built.model, built.buffers, batch);
    auto g = gradient(obj, built.params);
    auto fd = fd_gradient(obj, built.params);
    for (std::size_t i = 0; i < fd.size(); ++i) {
      // relative error per coordinate, floored where the derivative itself is
      // below the resolution of the difference quotient
      const double denom = std::max(std::abs(fd[i]), 1e-4);
      CHECK(std::abs(g[i] - fd[i]) / denom <= 1e-6);
    }
  }
}

TEST_CASE("HVP matches finite differences of the gradient") {
  const Batch batch = fixed_batch();
  for (const auto& tc : toy_models()) {
    CAPTURE(tc.name);
    auto built = build_model(tc.spec, 5);
    ClassifierObjective obj(built.model, built.buffers, batch);
    auto v = random_vector(built.params.size(), 17);
    HvpOperator op(obj, built.params);
    std::vector<double> hv(v.size());
    op.apply(v, hv);
    auto fd = fd_hvp(obj, built.params, v, 1e-4);
    CHECK(relative_error(hv, fd) <= 1e-4);
  }
}

TEST_CASE("HVP is linear and symmetric") {
  const Batch batch = fixed_batch();
  auto built = build_model(ModelSpec::mlp({4, 8, 6, 3}, Activation::tanh), 11);
  ClassifierObjective obj(built.model, built.buffers, batch);
  HvpOperator op(obj, built.params);
  const std::size_t n = op.dim();
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto u = random_vector(n, 1000 + trial);
    auto v = random_vector(n, 2000 + trial);
    const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
    std::vector<double> mix(n), hu(n), hv(n), hmix(n);
    for (std::size_t i = 0; i < n; ++i) mix[i] = alpha * u[i] + beta * v[i];
    op.apply(u, hu);
    op.apply(v, hv);
    op.apply(mix, hmix);
    std::vector<double> combo(n);
    for (std::size_t i = 0; i < n; ++i) combo[i] = alpha * hu[i] + beta * hv[i];
    CHECK(relative_error(hmix, combo) <= 1e-8);

    const double uhv = dot(u, hv), vhu = dot(v, hu);
    CHECK(std::abs(uhv - vhu) <= 1e-8 * std::max(std::abs(uhv), 1e-12));
  }
}

TEST_CASE("dense Hessian is symmetric for every toy model") {
  const Batch batch = fixed_batch();
  for (const auto& tc : toy_models()) {
    CAPTURE(tc.name);
    auto built = build_model(tc.spec, 7);
    REQUIRE(built.params.size() <= 2000);
    ClassifierObjective obj(built.model, built.buffers, batch);
    Tensor h = dense_hessian(obj, built.params);
    double scale = 0.0;
    for (double x : h.values()) scale = std::max(scale, std::abs(x));
    const std::size_t n = h.rows();
    double asym = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) asym = std::max(asym, std::abs(h.at(i, j) - h.at(j, i)));
    CHECK(asym <= 1e-8 * scale);
  }
}

TEST_CASE("forward, gradient and hvp are deterministic") {
  const Batch batch = fixed_batch();
  auto built = build_model(ModelSpec::mlp({4, 8, 3}, Activation::tanh), 2);
  ClassifierObjective obj(built.model, built.buffers, batch);
  auto v = random_vector(built.params.size(), 5);
  ParameterVector pv(built.params.layout(), v);
  CHECK(loss_forward(obj, built.params) == loss_forward(obj, built.params));
  CHECK(gradient(obj, built.params) == gradient(obj, built.params));
  CHECK(hvp(obj, built.params, pv) == hvp(obj, built.params, pv));
}

TEST_CASE("layout mismatch names the offending segment") {
  auto a = build_model(ModelSpec::mlp({4, 8, 3}), 0);
  auto b = build_model(ModelSpec::mlp({4, 9, 3}), 0);
  const Batch batch = fixed_batch();
  try {
    loss_forward(a.model, b.params, batch);
    FAIL("expected a ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.segment() == "dense0.weight");
  }
}

TEST_CASE("flatten and unflatten") {
  SegmentTable layout({{"a", {3}}, {"b", {2}}});
  CHECK(layout.total_size() == 5);
  CHECK(layout[0].offset == 0);
  CHECK(layout[1].offset == 3);

  std::vector<Tensor> w{Tensor({3}, std::vector<double>{1, 2, 3}),
                        Tensor({2}, std::vector<double>{4, 5})};
  auto flat = flatten(layout, w);
  CHECK(flat.size() == 5);
  CHECK(unflatten(flat) == w);

  CHECK_THROWS_AS(ParameterVector(layout, std::vector<double>(4)), ShapeError);
  std::vector<Tensor> wrong{Tensor({3}), Tensor({3})};
  CHECK_THROWS_AS(flatten(layout, wrong), ShapeError);
}

TEST_CASE("flatten/unflatten round trip over random layouts") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    std::vector<std::pair<std::string, Shape>> entries;
    const auto count = 1 + rng.below(6);
    for (std::uint64_t s = 0; s < count; ++s) {
      Shape shape;
      const auto rank = 1 + rng.below(3);
      for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(1 + rng.below(4));
      entries.push_back({"s" + std::to_string(s), shape});
    }
    SegmentTable layout(entries);
    std::vector<Tensor> weights;
    std::size_t expected_offset = 0;
    for (const auto& seg : layout.segments()) {
      CHECK(seg.offset == expected_offset);
      expected_offset += seg.size();
      Tensor t(seg.shape);
      for (double& x : t.values()) x = rng.normal();
      weights.push_back(t);
    }
    CHECK(layout.total_size() == expected_offset);
    auto flat = flatten(layout, weights);
    CHECK(unflatten(flat) == weights);
    CHECK(flatten(layout, unflatten(flat)) == flat);
  }
}

TEST_CASE("non-finite loss is reported as a numerical error") {
  QuadraticObjective quad(diag({1.0}));
  auto w = vec(quad.layout(), {std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(gradient(quad, w), NumericalError);
  CHECK_THROWS_AS(HvpOperator(quad, w), NumericalError);
}
