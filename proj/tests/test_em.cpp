#include <doctest.h>

#include <algorithm>

#include "flowmoe/em.hpp"
#include "support.hpp"

using namespace flowmoe;
using testing::LMatrix;
using testing::LVector;

namespace {

BinnedCytogram cell(int t, const Matrix& centers, const Vector& weights) {
  BinnedCytogram b;
  b.t = t;
  b.centers = centers;
  b.weights = weights;
  return b;
}

Matrix random_gamma_bar(CounterRng& rng, int T, int K) {
  Matrix g(T, K);
  for (int t = 0; t < T; ++t)
    for (int k = 0; k < K; ++k) g(t, k) = rng.uniform(0.05, 3.0);
  return g;
}

// Weighted least squares of y on [1, F] in extended precision.
LMatrix wls_oracle(const Vector& w, const Matrix& y, const Matrix& feats) {
  LMatrix x(feats.rows(), feats.cols() + 1);
  x.col(0).setOnes();
  x.rightCols(feats.cols()) = feats.cast<long double>();
  const LMatrix xtw = x.transpose() * w.cast<long double>().asDiagonal();
  return (xtw * x).ldlt().solve(xtw * y.cast<long double>());
}

SubsolverOptions tight() { return {1e-12, 50000}; }

}  // namespace

TEST_SUITE("e-step") {
  TEST_CASE("equidistant point between symmetric clusters splits evenly") {
    auto p = MoEParams::zeros(2, 1, 1);
    p.beta0(0, 0) = -1.0;
    p.beta0(1, 0) = 1.0;
    const std::vector<BinnedCytogram> data{cell(1, Matrix::Zero(1, 1), Vector::Ones(1))};
    const auto es = e_step(p, data, Matrix::Zero(1, 1));
    CHECK(es.resp.gamma[0](0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(es.resp.gamma[0](0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("point at one mean, 100 sd from the other") {
    auto p = MoEParams::zeros(2, 1, 1);
    p.beta0(1, 0) = 100.0;
    const std::vector<BinnedCytogram> data{cell(1, Matrix::Zero(1, 1), Vector::Ones(1))};
    const auto es = e_step(p, data, Matrix::Zero(1, 1));
    CHECK(es.resp.gamma[0](0, 0) > 1.0 - 1e-12);
  }

  TEST_CASE("K = 3 matches an extended-precision Bayes-rule oracle") {
    CounterRng rng(1, 1);
    Matrix centers(3, 2);
    centers << 0, 0, 1, 1, -1, 2;
    const auto data = testing::random_binned(rng, 4, 12, centers, 0.8);
    const Matrix feats = testing::random_matrix(rng, 4, 3);
    const auto p = testing::random_params(rng, 3, 2, 3);
    const auto es = e_step(p, data, feats);
    for (std::size_t t = 0; t < data.size(); ++t) {
      const LVector f = feats.row(static_cast<Eigen::Index>(t)).transpose().cast<long double>();
      for (Eigen::Index b = 0; b < data[t].size(); ++b) {
        std::vector<long double> terms;
        for (int k = 0; k < 3; ++k) {
          const LVector mu = p.beta0.row(k).transpose().cast<long double>() +
                             p.beta[k].cast<long double>().transpose() * f;
          const long double logit = p.alpha0[k] + p.alpha.col(k).cast<long double>().dot(f);
          terms.push_back(logit + testing::log_gauss_oracle(
                                      data[t].centers.row(b).transpose().cast<long double>(),
                                      mu, p.sigma[k].cast<long double>()));
        }
        const long double lse = testing::log_sum_exp_oracle(terms);
        for (int k = 0; k < 3; ++k)
          CHECK(std::abs(es.resp.gamma[t](b, k) - std::exp(terms[k] - lse)) < 1e-12L);
        CHECK(std::abs(es.resp.gamma[t].row(b).sum() - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("weights do not enter the responsibilities") {
    CounterRng rng(2, 1);
    Matrix centers(2, 1);
    centers << 0, 1;
    auto data = testing::random_binned(rng, 3, 5, centers, 0.5);
    const Matrix feats = testing::random_matrix(rng, 3, 2);
    const auto p = testing::random_params(rng, 2, 1, 2);
    const auto a = e_step(p, data, feats);
    for (auto& b : data) b.weights = b.weights.cwiseProduct(b.weights) * 7.0;
    const auto b = e_step(p, data, feats);
    for (std::size_t t = 0; t < data.size(); ++t)
      CHECK((a.resp.gamma[t] - b.resp.gamma[t]).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_SUITE("gating step") {
  TEST_CASE("analytic gradient matches central differences") {
    CounterRng rng(3, 1);
    for (int trial = 0; trial < 20; ++trial) {
      const int K = 2 + trial % 3;
      const int T = 15;
      const int nh = 4;
      const Matrix gb = random_gamma_bar(rng, T, K);
      const Matrix feats = testing::random_matrix(rng, T, nh);
      Vector a0 = testing::random_matrix(rng, K, 1);
      Matrix a = testing::random_matrix(rng, nh, K, 0.5);
      a0[K - 1] = 0;
      a.col(K - 1).setZero();
      Vector g0;
      Matrix ga;
      gating_gradient(gb, feats, a0, a, g0, ga);
      const double h = 1e-5;
      const double scale = std::max(g0.cwiseAbs().maxCoeff(), ga.cwiseAbs().maxCoeff());
      for (int k = 0; k + 1 < K; ++k) {
        Vector p0 = a0, m0 = a0;
        p0[k] += h;
        m0[k] -= h;
        const double fd = (gating_loss(gb, feats, p0, a) - gating_loss(gb, feats, m0, a)) / (2 * h);
        CHECK(std::abs(fd - g0[k]) <= 1e-5 * std::max(std::abs(g0[k]), scale));
        for (int j = 0; j < nh; ++j) {
          Matrix pa = a, ma = a;
          pa(j, k) += h;
          ma(j, k) -= h;
          const double fda =
              (gating_loss(gb, feats, a0, pa) - gating_loss(gb, feats, a0, ma)) / (2 * h);
          CHECK(std::abs(fda - ga(j, k)) <= 1e-5 * std::max(std::abs(ga(j, k)), scale));
        }
      }
      CHECK(g0[K - 1] == 0.0);
      CHECK(ga.col(K - 1).isZero(0.0));
    }
  }

  TEST_CASE("huge penalty: zero slopes and pooled log-odds intercepts") {
    CounterRng rng(4, 1);
    const Matrix gb = random_gamma_bar(rng, 30, 3);
    const Matrix feats = testing::random_matrix(rng, 30, 5);
    const auto res = m_step_gating(gb, feats, 1e6, Vector::Zero(3), Matrix::Zero(5, 3), tight());
    CHECK(res.alpha.isZero(0.0));
    const Vector sums = gb.colwise().sum().transpose();
    for (int k = 0; k < 3; ++k)
      CHECK(std::abs(res.alpha0[k] - std::log(sums[k] / sums[2])) < 1e-6);
  }

  TEST_CASE("all weight in cluster 1 drives its probability up monotonically") {
    const int T = 10;
    Matrix gb = Matrix::Zero(T, 2);
    gb.col(0).setOnes();
    const Matrix feats = Matrix::Zero(T, 1);
    Vector a0 = Vector::Zero(2);
    Matrix a = Matrix::Zero(1, 2);
    double last = gating_loss(gb, feats, a0, a);
    for (int round = 0; round < 5; ++round) {
      const auto res = m_step_gating(gb, feats, 0.0, a0, a, {1e-12, 50});
      CHECK(res.objective <= last);
      last = res.objective;
      a0 = res.alpha0;
      a = res.alpha;
    }
    CHECK(a0[0] > 3.0);
  }

  TEST_CASE("lasso optimality conditions, K = 3, T = 50, lambda 0.1") {
    CounterRng rng(5, 1);
    for (int trial = 0; trial < 5; ++trial) {
      const Matrix gb = random_gamma_bar(rng, 50, 3);
      const Matrix feats = testing::random_matrix(rng, 50, 4);
      const auto res =
          m_step_gating(gb, feats, 0.1, Vector::Zero(3), Matrix::Zero(4, 3), tight());
      Vector g0;
      Matrix ga;
      gating_gradient(gb, feats, res.alpha0, res.alpha, g0, ga);
      CHECK(g0.cwiseAbs().maxCoeff() < 1e-6);
      CHECK(testing::lasso_kkt_violation(ga.leftCols(2), res.alpha.leftCols(2), 0.1) < 1e-6);
    }
  }

  TEST_CASE("never worse than the warm start") {
    CounterRng rng(6, 1);
    const Matrix gb = random_gamma_bar(rng, 20, 2);
    const Matrix feats = testing::random_matrix(rng, 20, 3);
    Vector a0 = Vector::Zero(2);
    a0[0] = 0.3;
    Matrix warm = testing::random_matrix(rng, 3, 2);
    warm.col(1).setZero();
    const double lam = 0.05;
    const auto res = m_step_gating(gb, feats, lam, a0, warm, {1e-8, 3});
    CHECK(res.objective <= gating_loss(gb, feats, a0, warm) + lam * warm.cwiseAbs().sum());
  }
}

TEST_SUITE("means step") {
  TEST_CASE("analytic gradient matches central differences") {
    CounterRng rng(7, 1);
    for (int trial = 0; trial < 20; ++trial) {
      const int d = 1 + trial % 3;
      const int T = 12;
      const int nh = 3;
      const Vector w = (testing::random_matrix(rng, T, 1).array().abs() + 0.1).matrix();
      const Matrix ybar = testing::random_matrix(rng, T, d);
      const Matrix feats = testing::random_matrix(rng, T, nh);
      const Matrix prec = testing::random_spd(rng, d);
      const RowVector b0 = testing::random_matrix(rng, 1, d);
      const Matrix b = testing::random_matrix(rng, nh, d);
      const double total = w.sum() * 1.3;
      RowVector g0;
      Matrix gb;
      means_gradient(w, ybar, feats, prec, total, b0, b, g0, gb);
      const double scale = std::max(g0.cwiseAbs().maxCoeff(), gb.cwiseAbs().maxCoeff());
      const double h = 1e-5;
      for (int j = 0; j < d; ++j) {
        RowVector p0 = b0, m0 = b0;
        p0[j] += h;
        m0[j] -= h;
        const double fd = (means_loss(w, ybar, feats, prec, total, p0, b) -
                           means_loss(w, ybar, feats, prec, total, m0, b)) / (2 * h);
        CHECK(std::abs(fd - g0[j]) <= 1e-5 * std::max(std::abs(g0[j]), scale));
        for (int i = 0; i < nh; ++i) {
          Matrix pb = b, mb = b;
          pb(i, j) += h;
          mb(i, j) -= h;
          const double fdb = (means_loss(w, ybar, feats, prec, total, b0, pb) -
                              means_loss(w, ybar, feats, prec, total, b0, mb)) / (2 * h);
          CHECK(std::abs(fdb - gb(i, j)) <= 1e-5 * std::max(std::abs(gb(i, j)), scale));
        }
      }
    }
  }

  TEST_CASE("r = 0 collapses to the weighted average") {
    CounterRng rng(8, 1);
    const Vector w = (testing::random_matrix(rng, 20, 1).array().abs() + 0.1).matrix();
    const Matrix ybar = testing::random_matrix(rng, 20, 2);
    const Matrix feats = testing::random_matrix(rng, 20, 4);
    const auto res = m_step_means(w, ybar, feats, Matrix::Identity(2, 2), w.sum(), 0.01, 0.0,
                                  RowVector::Zero(2), Matrix::Zero(4, 2));
    CHECK(res.beta.isZero(0.0));
    const RowVector avg = (w.transpose() * ybar) / w.sum();
    CHECK((res.beta0 - avg).cwiseAbs().maxCoeff() < 1e-14);
  }

  TEST_CASE("unpenalized, unconstrained, d = 1 matches weighted least squares") {
    CounterRng rng(9, 1);
    for (int trial = 0; trial < 10; ++trial) {
      const Vector w = (testing::random_matrix(rng, 30, 1).array().abs() + 0.1).matrix();
      const Matrix ybar = testing::random_matrix(rng, 30, 1);
      const Matrix feats = testing::random_matrix(rng, 30, 5);
      const auto res =
          m_step_means(w, ybar, feats, Matrix::Identity(1, 1), w.sum(),
                       0.0, std::numeric_limits<double>::infinity(), RowVector::Zero(1),
                       Matrix::Zero(5, 1));
      const LMatrix oracle = wls_oracle(w, ybar, feats);
      Matrix got(6, 1);
      got(0, 0) = res.beta0[0];
      got.bottomRows(5) = res.beta;
      CHECK(testing::rel_err(got, oracle.cast<double>()) < 1e-8);
    }
  }

  TEST_CASE("lasso optimality conditions without the ball") {
    CounterRng rng(10, 1);
    for (int trial = 0; trial < 10; ++trial) {
      const int d = 1 + trial % 3;
      const Vector w = (testing::random_matrix(rng, 40, 1).array().abs() + 0.1).matrix();
      const Matrix ybar = testing::random_matrix(rng, 40, d);
      const Matrix feats = testing::random_matrix(rng, 40, 6);
      const Matrix sigma = testing::random_spd(rng, d);
      const double lam = 0.02 + 0.05 * trial / 10.0;
      const auto res = m_step_means(w, ybar, feats, sigma, w.sum(), lam,
                                    std::numeric_limits<double>::infinity(),
                                    RowVector::Zero(d), Matrix::Zero(6, d), tight());
      RowVector g0;
      Matrix gb;
      means_gradient(w, ybar, feats, sigma.inverse(), w.sum(), res.beta0, res.beta, g0, gb);
      CHECK(g0.cwiseAbs().maxCoeff() < 1e-10);
      CHECK(testing::lasso_kkt_violation(gb, res.beta, lam) < 1e-6);
    }
  }

  TEST_CASE("returned slopes are always feasible") {
    CounterRng rng(11, 1);
    for (int trial = 0; trial < 30; ++trial) {
      const int d = 1 + trial % 3;
      const Vector w = (testing::random_matrix(rng, 25, 1).array().abs() + 0.1).matrix();
      const Matrix ybar = testing::random_matrix(rng, 25, d, 2.0);
      const Matrix feats = testing::random_matrix(rng, 25, 5);
      const double r = rng.uniform(0.01, 1.0);
      const double lam = rng.uniform(0.0, 0.05);
      const auto res = m_step_means(w, ybar, feats, testing::random_spd(rng, d), w.sum(), lam,
                                    r, RowVector::Zero(d), Matrix::Zero(5, d));
      CHECK((feats * res.beta).rowwise().norm().maxCoeff() <= r + 1e-8);
    }
  }
}

TEST_SUITE("covariance step") {
  TEST_CASE("K = 1 with a constant mean is the weighted sample covariance") {
    CounterRng rng(12, 1);
    Matrix centers(1, 3);
    centers << 0, 1, 2;
    const auto data = testing::random_binned(rng, 5, 8, centers, 0.7);
    Responsibilities resp;
    for (const auto& b : data) resp.gamma.push_back(Matrix::Ones(b.size(), 1));
    RowVector mu(3);
    mu << 0.1, 0.9, 2.2;
    const std::vector<Matrix> means{Matrix(mu.replicate(5, 1))};
    const auto sigma = m_step_sigma(data, resp, means, {Matrix::Identity(3, 3)});
    LMatrix s = LMatrix::Zero(3, 3);
    long double w = 0;
    for (const auto& b : data)
      for (Eigen::Index i = 0; i < b.size(); ++i) {
        const LVector r = (b.centers.row(i) - mu).transpose().cast<long double>();
        s += b.weights[i] * r * r.transpose();
        w += b.weights[i];
      }
    CHECK((sigma[0].cast<long double>() - s / w).cwiseAbs().maxCoeff() < 1e-10L);
  }

  TEST_CASE("identical points give the floor") {
    const std::vector<BinnedCytogram> data{
        cell(1, Matrix::Constant(3, 2, 1.5), Vector::Ones(3))};
    Responsibilities resp{{Matrix::Ones(3, 1)}};
    const std::vector<Matrix> means{Matrix::Constant(1, 2, 1.5)};
    const auto sigma = m_step_sigma(data, resp, means, {Matrix::Identity(2, 2)});
    CHECK((sigma[0] - kCovarianceFloor * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-20);
  }

  TEST_CASE("doubling all weights leaves the covariance unchanged") {
    CounterRng rng(13, 1);
    Matrix centers(1, 2);
    centers << 0, 0;
    auto data = testing::random_binned(rng, 4, 6, centers);
    Responsibilities resp;
    for (const auto& b : data) resp.gamma.push_back(Matrix::Ones(b.size(), 1));
    const std::vector<Matrix> means{Matrix::Zero(4, 2)};
    const auto a = m_step_sigma(data, resp, means, {Matrix::Identity(2, 2)});
    for (auto& b : data) b.weights *= 2.0;
    const auto b = m_step_sigma(data, resp, means, {Matrix::Identity(2, 2)});
    CHECK((a[0] - b[0]).cwiseAbs().maxCoeff() < 1e-15);
  }

  TEST_CASE("floor clamps the spectrum and keeps symmetry") {
    Matrix s(2, 2);
    s << 1, 1, 1, 1;
    const Matrix f = floor_covariance(s);
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(f);
    CHECK(eig.eigenvalues().minCoeff() >= kCovarianceFloor * (1 - 1e-6));
    CHECK(f == f.transpose());
  }
}

TEST_SUITE("initialization") {
  TEST_CASE("K = 1 starts at the pooled weighted mean") {
    CounterRng rng(14, 1);
    Matrix centers(2, 2);
    centers << 0, 0, 3, 1;
    const auto data = testing::random_binned(rng, 5, 7, centers);
    const auto p = initialize(data, Matrix::Zero(5, 3), 1, 9);
    RowVector mean = RowVector::Zero(2);
    double w = 0;
    for (const auto& b : data) {
      mean += b.weights.transpose() * b.centers;
      w += b.weights.sum();
    }
    CHECK((p.beta0.row(0) - mean / w).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(p.beta[0].isZero(0.0));
    CHECK(p.alpha.isZero(0.0));
  }

  TEST_CASE("same seed, same start") {
    CounterRng rng(15, 1);
    Matrix centers(3, 1);
    centers << 0, 2, 5;
    const auto data = testing::random_binned(rng, 6, 9, centers);
    const auto a = initialize(data, Matrix::Zero(6, 2), 3, 42);
    const auto b = initialize(data, Matrix::Zero(6, 2), 3, 42);
    CHECK(a.beta0 == b.beta0);
    CHECK(a.sigma == b.sigma);
  }

  TEST_CASE("two separated blobs are seeded apart in at least 95% of 1000 seeds") {
    CounterRng rng(16, 1);
    Matrix centers(2, 2);
    centers << -10, 0, 10, 0;
    const auto data = testing::random_binned(rng, 4, 25, centers, 1.0);
    int apart = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto p = initialize(data, Matrix::Zero(4, 1), 2, seed);
      if ((p.beta0(0, 0) < 0) != (p.beta0(1, 0) < 0)) ++apart;
    }
    CHECK(apart >= 950);
  }

  TEST_CASE("too few distinct points") {
    const std::vector<BinnedCytogram> data{
        cell(1, Matrix::Constant(4, 1, 1.0), Vector::Ones(4)),
        cell(2, Matrix::Constant(2, 1, 2.0), Vector::Ones(2))};
    CHECK_THROWS_AS(initialize(data, Matrix::Zero(2, 1), 3, 0), DataError);
  }
}

TEST_SUITE("fit") {
  TEST_CASE("K = 1, no penalty, no ball: normal equations and residual covariance") {
    CounterRng rng(17, 1);
    const int T = 25;
    const int nh = 4;
    const Matrix feats = testing::random_matrix(rng, T, nh);
    Matrix centers(1, 2);
    centers << 1, -1;
    auto data = testing::random_binned(rng, T, 6, centers, 0.5);
    for (int t = 0; t < T; ++t) data[t].centers.col(0).array() += 0.8 * feats(t, 0);
    FitConfig cfg;
    cfg.K = 1;
    cfg.restarts = 1;
    const auto res = fit(data, feats, cfg);

    Vector w(T);
    Matrix ybar(T, 2);
    for (int t = 0; t < T; ++t) {
      w[t] = data[t].weights.sum();
      ybar.row(t) = data[t].weights.transpose() * data[t].centers / w[t];
    }
    const LMatrix theta = wls_oracle(w, ybar, feats);
    CHECK(testing::rel_err(res.params.beta[0], theta.bottomRows(nh).cast<double>()) < 1e-8);
    CHECK(testing::rel_err(res.params.beta0, theta.topRows(1).cast<double>()) < 1e-8);

    LMatrix s = LMatrix::Zero(2, 2);
    long double c = 0;
    for (int t = 0; t < T; ++t) {
      LVector f(nh + 1);
      f << 1.0L, feats.row(t).transpose().cast<long double>();
      const LVector mu = theta.transpose() * f;
      for (Eigen::Index b = 0; b < data[t].size(); ++b) {
        const LVector r = data[t].centers.row(b).transpose().cast<long double>() - mu;
        s += data[t].weights[b] * r * r.transpose();
        c += data[t].weights[b];
      }
    }
    CHECK((res.params.sigma[0].cast<long double>() - s / c).cwiseAbs().maxCoeff() < 1e-10L);
  }

  TEST_CASE("huge penalties on two separated clusters give the weighted centroids") {
    CounterRng rng(18, 1);
    Matrix centers(2, 1);
    centers << -5, 5;
    const auto data = testing::random_binned(rng, 10, 12, centers, 0.3);
    const Matrix feats = testing::random_matrix(rng, 10, 3);
    FitConfig cfg;
    cfg.K = 2;
    cfg.restarts = 3;
    cfg.lambda_alpha = cfg.lambda_beta = 1e6;
    cfg.tol = 1e-12;
    const auto res = fit(data, feats, cfg);
    double lo = 0, wlo = 0, hi = 0, whi = 0;
    for (const auto& b : data)
      for (Eigen::Index i = 0; i < b.size(); ++i) {
        if (b.centers(i, 0) < 0) {
          lo += b.weights[i] * b.centers(i, 0);
          wlo += b.weights[i];
        } else {
          hi += b.weights[i] * b.centers(i, 0);
          whi += b.weights[i];
        }
      }
    std::vector<double> got{res.params.beta0(0, 0), res.params.beta0(1, 0)};
    std::sort(got.begin(), got.end());
    CHECK(std::abs(got[0] - lo / wlo) < 1e-6);
    CHECK(std::abs(got[1] - hi / whi) < 1e-6);
    for (const auto& b : res.params.beta) CHECK(b.isZero(0.0));
    CHECK(res.params.alpha.isZero(0.0));
  }

  TEST_CASE("repeated fits are identical") {
    CounterRng rng(19, 1);
    Matrix centers(2, 2);
    centers << 0, 0, 2, 2;
    const auto data = testing::random_binned(rng, 8, 10, centers, 0.6);
    const Matrix feats = testing::random_matrix(rng, 8, 3);
    FitConfig cfg;
    cfg.restarts = 5;
    cfg.lambda_alpha = 0.01;
    cfg.lambda_beta = 0.01;
    cfg.r = 1.0;
    cfg.seed = 5;
    const auto a = fit(data, feats, cfg);
    const auto b = fit(data, feats, cfg);
    CHECK(a.objective_trace == b.objective_trace);
    CHECK(a.params.beta0 == b.params.beta0);
    CHECK(a.params.alpha == b.params.alpha);
    CHECK(a.restart_objectives == b.restart_objectives);
    CHECK(a.restart_index == b.restart_index);
  }

  TEST_CASE("trace is monotone, iterates are feasible, winner is the best restart") {
    CounterRng rng(20, 1);
    for (int trial = 0; trial < 6; ++trial) {
      const int K = 1 + trial % 3;
      const int d = 1 + (trial / 3) % 2;
      Matrix centers = testing::random_matrix(rng, K, d, 2.0);
      const auto data = testing::random_binned(rng, 12, 8, centers, 0.5);
      const Matrix feats = testing::random_matrix(rng, 12, 4).array().abs().min(1.0);
      FitConfig cfg;
      cfg.K = K;
      cfg.restarts = 3;
      cfg.r = rng.uniform(0.05, 1.0);
      cfg.lambda_alpha = rng.uniform(0.0, 0.05);
      cfg.lambda_beta = rng.uniform(0.0, 0.05);
      cfg.seed = static_cast<std::uint64_t>(trial);
      const auto res = fit(data, feats, cfg);
      for (std::size_t i = 1; i < res.objective_trace.size(); ++i)
        CHECK(res.objective_trace[i] <= res.objective_trace[i - 1] + 1e-8);
      for (double dev : res.deviation_trace) CHECK(dev <= cfg.r + 1e-8);
      CHECK(res.objective() ==
            *std::min_element(res.restart_objectives.begin(), res.restart_objectives.end()));
      CHECK(std::abs(res.objective() - penalized_objective(res.params, data, feats,
                                                           cfg.lambda_alpha, cfg.lambda_beta)) <
            1e-12);
    }
  }

  TEST_CASE("invalid inputs") {
    const std::vector<BinnedCytogram> data{cell(1, Matrix::Constant(2, 1, 1.0), Vector::Ones(2))};
    FitConfig cfg;
    cfg.K = 2;
    cfg.restarts = 1;
    CHECK_THROWS_AS(fit(data, Matrix::Zero(1, 1), cfg), DataError);
    const std::vector<BinnedCytogram> zero{cell(1, Matrix::Zero(2, 1), Vector::Zero(2))};
    cfg.K = 1;
    CHECK_THROWS_AS(fit(zero, Matrix::Zero(1, 1), cfg), DataError);
    cfg.restarts = 0;
    CHECK_THROWS_AS(fit(data, Matrix::Zero(1, 1), cfg), UsageError);
  }
}
