#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "flowmoe/data.hpp"
#include "flowmoe/types.hpp"

namespace flowmoe {

// log(sum(exp(x))) with max subtraction.
template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.derived().array() - m).exp().sum());
}

template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = logits.maxCoeff();
  VectorX<Scalar> p = (logits.array() - m).exp().matrix();
  return p / p.sum();
}

// Cholesky factor of one covariance together with its log normalizing
// constant, so repeated density evaluations share the factorization.
template <typename Scalar>
class GaussianFactor {
 public:
  GaussianFactor() = default;
  explicit GaussianFactor(const MatrixX<Scalar>& sigma) : llt_(sigma) {
    if (llt_.info() != Eigen::Success)
      throw SolverError("covariance is not positive definite");
    const auto& l = llt_.matrixLLT();
    Scalar log_det = 0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) {
      if (!(l(i, i) > Scalar(0)))
        throw SolverError("covariance is not positive definite");
      log_det += Scalar(2) * std::log(l(i, i));
    }
    log_norm_ = Scalar(-0.5) * (static_cast<Scalar>(l.rows()) *
                                    std::log(Scalar(2) * std::numbers::pi_v<Scalar>) +
                                log_det);
  }

  template <typename Derived>
  Scalar log_density(const Eigen::MatrixBase<Derived>& residual) const {
    const VectorX<Scalar> z =
        llt_.matrixL().solve(residual.template cast<Scalar>().eval());
    return log_norm_ - Scalar(0.5) * z.squaredNorm();
  }

  Scalar log_norm() const { return log_norm_; }
  const Eigen::LLT<MatrixX<Scalar>>& llt() const { return llt_; }

 private:
  Eigen::LLT<MatrixX<Scalar>> llt_;
  Scalar log_norm_ = 0;
};

// Gating coefficients alpha, expert coefficients beta and covariances.
// Cluster K-1 (0-based) is the gating anchor: its intercept and slopes stay 0.
struct MoEParams {
  Vector alpha0;              // K
  Matrix alpha;               // n_h x K
  Matrix beta0;               // K x d
  std::vector<Matrix> beta;   // K entries, n_h x d
  std::vector<Matrix> sigma;  // K entries, d x d

  int clusters() const { return static_cast<int>(alpha0.size()); }
  int dim() const { return static_cast<int>(beta0.cols()); }
  int feature_dim() const { return static_cast<int>(alpha.rows()); }

  static MoEParams zeros(int K, int d, int n_h);
  void validate() const;
};

struct ModelPrediction {
  Matrix mu;  // K x d
  Vector pi;  // K
};

ModelPrediction predict(const MoEParams& params, const Vector& features);

// Per-time cluster means (K entries of T x d) and gating logits (T x K).
std::vector<Matrix> cluster_means(const MoEParams& params, const Matrix& feats);
Matrix gating_logits(const MoEParams& params, const Matrix& feats);

// log phi_d(y | mu_k, Sigma_k) with mu_k evaluated at `features`; the first
// overload uses the intercept beta_0k as the mean.
double per_cluster_logdensity(const MoEParams& params, const Vector& y, int k);
double per_cluster_logdensity(const MoEParams& params, const Vector& y, int k,
                              const Vector& features);

std::vector<GaussianFactor<double>> factorize(const MoEParams& params);

// Normalized weighted log pseudolikelihood
//   (1 / C) sum_t sum_b c_b log sum_k pi_kt phi(y_b | mu_kt, Sigma_k),
// with C the total weight of `data`.
double log_pseudolikelihood(const MoEParams& params,
                            std::span<const BinnedCytogram> data,
                            const Matrix& feats);

// Unnormalized per-time sums sum_b c_b log f(y_b); summed in time order.
Vector weighted_loglik_by_time(const MoEParams& params,
                               std::span<const BinnedCytogram> data,
                               const Matrix& feats);

// Penalized objective of the fitting problem:
//   -loglik / C + lambda_alpha * sum ||alpha_k||_1 + lambda_beta * sum ||beta_k||_1
double l1_penalty(const MoEParams& params, double lambda_alpha,
                  double lambda_beta);

// max over k, t of ||beta_k' f_t||_2.
double max_deviation(const MoEParams& params, const Matrix& feats);

}  // namespace flowmoe
