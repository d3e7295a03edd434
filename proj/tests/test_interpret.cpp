#include <doctest.h>

#include "flowmoe/em.hpp"
#include "flowmoe/interpret.hpp"
#include "flowmoe/simgen.hpp"
#include "support.hpp"

using namespace flowmoe;

namespace {

PrcRequest mean_request(const Matrix& psi, int k, int dim, int sweep, int n = 21) {
  PrcRequest req;
  req.target = PrcTarget{PrcTarget::Kind::mean, k, dim};
  req.sweep_pc = sweep;
  const auto summary = ComponentSummary::of(psi);
  req.grid = sweep_grid(summary, sweep, n);
  req.baseline = summary.mean;
  req.ranges = summary;
  return req;
}

// Largest difference-of-differences between pairs of curves, after removing
// each pair's offset at the first grid point.
double max_nonparallel(const std::vector<std::vector<PrcPoint>>& curves) {
  double worst = 0.0;
  for (std::size_t a = 0; a < curves.size(); ++a)
    for (std::size_t b = a + 1; b < curves.size(); ++b) {
      const double base = curves[a][0].value - curves[b][0].value;
      for (std::size_t i = 0; i < curves[a].size(); ++i)
        worst = std::max(worst,
                         std::abs(curves[a][i].value - curves[b][i].value - base));
    }
  return worst;
}

}  // namespace

TEST_SUITE("partial response") {
  CounterRng rng(1, 1);
  const Matrix psi = testing::random_matrix(rng, 40, 4, 2.0);

  TEST_CASE("zero slopes give flat curves") {
    const auto rfm = make_random_features(2, 4, 8, 0.5, Activation::logistic);
    auto p = MoEParams::zeros(3, 2, 8);
    p.beta0 << 1, 2, 3, 4, 5, 6;
    const auto curve = partial_response(p, rfm, mean_request(psi, 1, 1, 2));
    for (const auto& pt : curve) CHECK(pt.value == 4.0);
    auto req = mean_request(psi, 0, 0, 0);
    req.target = PrcTarget{PrcTarget::Kind::probability, 0, 0};
    for (const auto& pt : partial_response(p, rfm, req))
      CHECK(pt.value == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("linear variant curves are affine with the coefficient as slope") {
    const auto rfm = make_linear_variant(4);
    CounterRng r2(3, 1);
    const auto p = testing::random_params(r2, 2, 2, 4);
    for (int j = 0; j < 4; ++j) {
      const auto curve = partial_response(p, rfm, mean_request(psi, 1, 0, j));
      for (std::size_t i = 1; i < curve.size(); ++i) {
        const double slope =
            (curve[i].value - curve[0].value) / (curve[i].x - curve[0].x);
        CHECK(std::abs(slope - p.beta[1](j, 0)) < 1e-12);
      }
    }
  }

  TEST_CASE("each point equals a direct prediction") {
    const auto rfm = make_random_features(4, 4, 10, 0.5, Activation::logistic);
    CounterRng r2(5, 1);
    const auto p = testing::random_params(r2, 3, 2, 10, 1.0);
    auto req = mean_request(psi, 2, 1, 1, 31);
    req.conditioning = {{0, -1.0}};
    const auto curve = partial_response(p, rfm, req);
    for (const auto& pt : curve) {
      Vector v = req.baseline;
      v[0] = -1.0;
      v[1] = pt.x;
      const auto pred = predict(p, hidden_features(rfm, v));
      CHECK(std::abs(pt.value - pred.mu(2, 1)) <= 1e-14);
    }
  }

  TEST_CASE("probability curves lie in the unit interval and sum to one") {
    const auto rfm = make_random_features(6, 4, 10, 0.5, Activation::logistic);
    CounterRng r2(7, 1);
    const auto p = testing::random_params(r2, 3, 1, 10, 2.0);
    std::vector<std::vector<PrcPoint>> curves;
    for (int k = 0; k < 3; ++k) {
      auto req = mean_request(psi, k, 0, 3);
      req.target = PrcTarget{PrcTarget::Kind::probability, k, 0};
      curves.push_back(partial_response(p, rfm, req));
    }
    for (std::size_t i = 0; i < curves[0].size(); ++i) {
      double s = 0;
      for (int k = 0; k < 3; ++k) {
        CHECK(curves[k][i].value >= 0.0);
        CHECK(curves[k][i].value <= 1.0);
        s += curves[k][i].value;
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }

  TEST_CASE("repeated calls are bit-identical") {
    const auto rfm = make_random_features(8, 4, 10, 0.5, Activation::logistic);
    CounterRng r2(9, 1);
    const auto p = testing::random_params(r2, 2, 1, 10);
    const auto req = mean_request(psi, 0, 0, 1, 201);
    const auto a = partial_response(p, rfm, req);
    const auto b = partial_response(p, rfm, req);
    REQUIRE(a.size() == 201);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].x == b[i].x);
      CHECK(a[i].value == b[i].value);
    }
  }

  TEST_CASE("range check and index errors") {
    const auto rfm = make_linear_variant(4);
    const auto p = MoEParams::zeros(2, 1, 4);
    auto req = mean_request(psi, 0, 0, 0);
    req.grid.push_back(1e3);
    CHECK_THROWS_AS(partial_response(p, rfm, req), UsageError);
    req.extrapolate = true;
    CHECK_NOTHROW(partial_response(p, rfm, req));
    req.sweep_pc = 4;
    CHECK_THROWS_AS(partial_response(p, rfm, req), UsageError);
    req.sweep_pc = 0;
    req.target.cluster = 2;
    CHECK_THROWS_AS(partial_response(p, rfm, req), UsageError);
    req.target.cluster = 0;
    req.target.dim = 1;
    CHECK_THROWS_AS(partial_response(p, rfm, req), UsageError);
    req.target.dim = 0;
    req.conditioning = {{7, 0.0}};
    CHECK_THROWS_AS(partial_response(p, rfm, req), UsageError);
  }

  TEST_CASE("sweep grid spans the observed range") {
    const auto summary = ComponentSummary::of(psi);
    const auto g = sweep_grid(summary, 2, 201);
    CHECK(g.size() == 201);
    CHECK(g.front() == summary.min[2]);
    CHECK(g.back() == doctest::Approx(summary.max[2]).epsilon(1e-15));
  }
}

TEST_SUITE("conditional partial response") {
  TEST_CASE("three values give three curves; linear variant curves are parallel") {
    CounterRng rng(10, 1);
    Matrix psi = testing::random_matrix(rng, 50, 4, 3.0);
    const auto rfm = make_linear_variant(4);
    const auto p = testing::random_params(rng, 2, 1, 4);
    auto req = mean_request(psi, 0, 0, 1);
    req.extrapolate = true;
    const auto curves = conditional_partial_response(p, rfm, req, {-6.0, -1.0, 4.0});
    REQUIRE(curves.size() == 3);
    CHECK(max_nonparallel(curves) < 1e-10);
  }

  TEST_CASE("logistic features refit on an interaction scenario give non-parallel curves") {
    const int T = 120;
    const Matrix psi = synthetic_components(T, 4, 2);
    const auto s = SimScenario::make(SimConfig::nonlinear_mean, FunctionKind::interaction,
                                     0.95, 100, 3);
    const auto ds = generate(s, psi);
    const auto data = bin_all(ds.cytograms, default_grid(ds.cytograms, 40));
    const auto rfm = make_random_features(5, 4, 30, 0.5, Activation::logistic);
    const Matrix feats = hidden_features(rfm, psi);
    FitConfig cfg;
    cfg.K = 2;
    cfg.restarts = 2;
    cfg.lambda_alpha = 1e-4;
    cfg.lambda_beta = 1e-5;
    cfg.max_iter = 100;
    cfg.subsolver_tol = 1e-6;
    cfg.subsolver_max_iter = 500;
    const auto res = fit(data, feats, cfg);
    const int k = res.params.beta0(0, 0) < res.params.beta0(1, 0) ? 0 : 1;
    auto req = mean_request(psi, k, 0, 3);
    req.extrapolate = true;
    const auto curves = conditional_partial_response(res.params, rfm, req, {-6.0, -1.0, 4.0});
    CHECK(max_nonparallel(curves) > 1e-9);
    CHECK(max_nonparallel(curves) > 0.005);
  }
}
