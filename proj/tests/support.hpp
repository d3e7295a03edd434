#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowmoe/data.hpp"
#include "flowmoe/model.hpp"
#include "flowmoe/rng.hpp"

namespace testing {

using flowmoe::BinnedCytogram;
using flowmoe::Matrix;
using flowmoe::Vector;
using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using LVector = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

inline Matrix random_matrix(flowmoe::CounterRng& rng, Eigen::Index rows,
                            Eigen::Index cols, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, sd);
  return m;
}

inline Matrix random_spd(flowmoe::CounterRng& rng, int d, double ridge = 0.5) {
  const Matrix a = random_matrix(rng, d, d);
  return a * a.transpose() / d + ridge * Matrix::Identity(d, d);
}

// Weighted point clouds around `centers` (K x d), `m` cells per time.
inline std::vector<BinnedCytogram> random_binned(flowmoe::CounterRng& rng, int T,
                                                 int m, const Matrix& centers,
                                                 double spread = 0.3) {
  std::vector<BinnedCytogram> out;
  const auto d = centers.cols();
  for (int t = 0; t < T; ++t) {
    BinnedCytogram b;
    b.t = t + 1;
    b.centers.resize(m, d);
    b.weights.resize(m);
    for (int i = 0; i < m; ++i) {
      const auto k = static_cast<Eigen::Index>(rng.next_u64() %
                                               static_cast<std::uint64_t>(centers.rows()));
      for (Eigen::Index j = 0; j < d; ++j)
        b.centers(i, j) = centers(k, j) + rng.normal(0.0, spread);
      b.weights[i] = rng.uniform(0.2, 2.0);
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline flowmoe::MoEParams random_params(flowmoe::CounterRng& rng, int K, int d,
                                        int n_h, double slope_sd = 0.3) {
  auto p = flowmoe::MoEParams::zeros(K, d, n_h);
  for (int k = 0; k + 1 < K; ++k) {
    p.alpha0[k] = rng.normal(0.0, 1.0);
    for (int j = 0; j < n_h; ++j) p.alpha(j, k) = rng.normal(0.0, slope_sd);
  }
  for (int k = 0; k < K; ++k) {
    for (int j = 0; j < d; ++j) p.beta0(k, j) = rng.normal(0.0, 1.0);
    p.beta[k] = random_matrix(rng, n_h, d, slope_sd);
    p.sigma[k] = random_spd(rng, d);
  }
  return p;
}

// Gaussian log density from an explicit inverse and determinant.
inline long double log_gauss_oracle(const LVector& y, const LVector& mu,
                                    const LMatrix& sigma) {
  const auto d = static_cast<long double>(y.size());
  const LVector r = y - mu;
  const long double quad = r.dot(sigma.inverse() * r);
  return -0.5L * (d * std::log(2.0L * 3.14159265358979323846264338327950288L) +
                  std::log(sigma.determinant()) + quad);
}

inline long double log_sum_exp_oracle(const std::vector<long double>& v) {
  long double m = v.front();
  for (auto x : v) m = std::max(m, x);
  long double s = 0;
  for (auto x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  const double scale = std::max(b.norm(), 1e-300);
  return (a - b).norm() / scale;
}

// Largest violation of the lasso optimality conditions for slopes `coef`
// with smooth-part gradient `grad`: |g| <= lambda where coef = 0, and
// g = -lambda * sign(coef) elsewhere.
inline double lasso_kkt_violation(const Matrix& grad, const Matrix& coef,
                                  double lambda) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < coef.rows(); ++i)
    for (Eigen::Index j = 0; j < coef.cols(); ++j) {
      const double g = grad(i, j);
      const double c = coef(i, j);
      const double v = c == 0.0 ? std::max(0.0, std::abs(g) - lambda)
                                : std::abs(g + lambda * (c > 0 ? 1.0 : -1.0));
      worst = std::max(worst, v);
    }
  return worst;
}

// Scratch directory unique to the test binary, emptied on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("flowmoe_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace testing
