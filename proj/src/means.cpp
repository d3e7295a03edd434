#include <fmt/format.h>

#include <cmath>

#include "flowmoe/em.hpp"

namespace flowmoe {

namespace {

Matrix residuals(const Matrix& ybar, const Matrix& feats,
                 const RowVector& beta0, const Matrix& beta) {
  Matrix res = ybar - feats * beta;
  res.rowwise() -= beta0;
  return res;
}

// Projects each row onto the Euclidean ball of radius r.
void project_rows(Matrix& m, double r) {
  if (std::isinf(r)) return;
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    const double n = m.row(t).norm();
    if (n > r) m.row(t) *= r / n;
  }
}

Matrix soft_threshold(const Matrix& m, double t) {
  return m.unaryExpr([t](double v) {
    if (v > t) return v - t;
    if (v < -t) return v + t;
    return 0.0;
  });
}

RowVector best_intercept(const Vector& weight, const Matrix& ybar,
                         const Matrix& feats, const Matrix& beta) {
  const double w = weight.sum();
  return (weight.transpose() * (ybar - feats * beta)) / w;
}

// Shrinks beta until every deviation ||beta' f_t|| is at most r.
void make_feasible(Matrix& beta, const Matrix& feats, double r) {
  if (std::isinf(r) || feats.rows() == 0) return;
  if (r == 0.0) {
    beta.setZero();
    return;
  }
  for (int guard = 0; guard < 64; ++guard) {
    const double dev = (feats * beta).rowwise().norm().maxCoeff();
    if (dev <= r) return;
    beta *= (r / dev) * (1.0 - 4e-16 * (guard + 1));
  }
  beta.setZero();
}

}  // namespace

double means_loss(const Vector& weight, const Matrix& ybar, const Matrix& feats,
                  const Matrix& precision, double total,
                  const RowVector& beta0, const Matrix& beta) {
  const Matrix res = residuals(ybar, feats, beta0, beta);
  const Matrix sr = res * precision;
  return 0.5 * (weight.array() * (sr.array() * res.array()).rowwise().sum())
                   .sum() /
         total;
}

void means_gradient(const Vector& weight, const Matrix& ybar,
                    const Matrix& feats, const Matrix& precision, double total,
                    const RowVector& beta0, const Matrix& beta,
                    RowVector& grad_beta0, Matrix& grad_beta) {
  const Matrix res = residuals(ybar, feats, beta0, beta);
  const Matrix g = -(weight.asDiagonal() * res * precision) / total;
  grad_beta0 = g.colwise().sum();
  grad_beta = feats.transpose() * g;
}

MeansResult m_step_means(const Vector& weight, const Matrix& ybar,
                         const Matrix& feats, const Matrix& sigma,
                         double total, double lambda_beta, double r,
                         const RowVector& warm_beta0, const Matrix& warm_beta,
                         const SubsolverOptions& opts) {
  const Eigen::Index T = feats.rows();
  const Eigen::Index nh = feats.cols();
  const Eigen::Index d = ybar.cols();
  if (weight.size() != T || ybar.rows() != T || warm_beta.rows() != nh ||
      warm_beta.cols() != d || warm_beta0.size() != d || sigma.rows() != d)
    throw UsageError("mean subproblem dimensions do not agree");
  if (!(r >= 0.0)) throw UsageError("maximum deviation must be non-negative");

  const Eigen::LLT<Matrix> sigma_llt(sigma);
  if (sigma_llt.info() != Eigen::Success)
    throw SolverError("covariance is not positive definite");
  const Matrix precision = sigma_llt.solve(Matrix::Identity(d, d));

  auto objective = [&](const RowVector& b0, const Matrix& b) {
    return means_loss(weight, ybar, feats, precision, total, b0, b) +
           lambda_beta * b.cwiseAbs().sum();
  };

  MeansResult out;
  const double warm_objective = objective(warm_beta0, warm_beta);
  auto finish = [&](Matrix beta) {
    make_feasible(beta, feats, r);
    const RowVector beta0 = best_intercept(weight, ybar, feats, beta);
    const double f = objective(beta0, beta);
    if (f <= warm_objective) {
      out.beta0 = beta0;
      out.beta = std::move(beta);
      out.objective = f;
    } else {
      out.beta0 = warm_beta0;
      out.beta = warm_beta;
      out.objective = warm_objective;
      out.accepted = false;
    }
    return out;
  };

  if (!(weight.sum() > 0.0)) {
    out.beta0 = warm_beta0;
    out.beta = warm_beta;
    out.objective = warm_objective;
    out.converged = true;
    out.accepted = false;
    return out;
  }
  if (r == 0.0 || nh == 0) {
    out.converged = true;
    return finish(Matrix::Zero(nh, d));
  }

  // Design [1, F] with weights w_t / C.
  Matrix x(T, nh + 1);
  x.col(0).setOnes();
  x.rightCols(nh) = feats;
  const Vector wn = weight / total;
  const Matrix gram = x.transpose() * wn.asDiagonal() * x;
  const Matrix cross = x.transpose() * wn.asDiagonal() * ybar;

  const bool constrained = !std::isinf(r);
  if (lambda_beta == 0.0 && !constrained) {
    // Unpenalized and unconstrained: weighted least squares. The precision
    // factors out of the normal equations.
    const Eigen::CompleteOrthogonalDecomposition<Matrix> cod(gram);
    const Matrix theta = cod.solve(cross);
    out.converged = true;
    out.iterations = 1;
    return finish(theta.bottomRows(nh));
  }

  // Simultaneous diagonalization: with S = Q diag(ev) Q', column j of
  // Theta Q solves (ev_j * gram + rho * M) x = (R Q)_j.
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(precision);
  const Vector& ev = eig.eigenvalues();
  const Matrix& q = eig.eigenvectors();

  const Matrix ftf = feats.transpose() * feats;
  double rho1 = ev.mean() * gram.diagonal().mean();
  if (!(rho1 > 0.0)) rho1 = 1.0;
  double rho2 = constrained
                    ? rho1 * static_cast<double>(nh) /
                          std::max(ftf.trace(), 1e-300)
                    : 0.0;

  std::vector<Eigen::LLT<Matrix>> systems(static_cast<std::size_t>(d));
  auto factor = [&] {
    Matrix m = Matrix::Zero(nh + 1, nh + 1);
    m.bottomRightCorner(nh, nh).diagonal().array() += rho1;
    if (constrained) m.bottomRightCorner(nh, nh) += rho2 * ftf;
    for (Eigen::Index j = 0; j < d; ++j) {
      systems[j].compute(ev[j] * gram + m);
      if (systems[j].info() != Eigen::Success)
        throw SolverError("mean subproblem system is singular");
    }
  };
  factor();

  const Matrix rhs_data = cross * precision;
  Matrix theta(nh + 1, d);
  theta.row(0) = warm_beta0;
  theta.bottomRows(nh) = warm_beta;
  Matrix z1 = warm_beta;
  Matrix u1 = Matrix::Zero(nh, d);
  Matrix z2 = constrained ? Matrix(feats * warm_beta) : Matrix();
  project_rows(z2, r);
  Matrix u2 = constrained ? Matrix::Zero(T, d) : Matrix();

  const double eps_abs = opts.tol;
  const double eps_rel = opts.tol;
  int adaptations = 0;
  for (int it = 1; it <= opts.max_iter; ++it) {
    out.iterations = it;
    Matrix rhs = rhs_data;
    rhs.bottomRows(nh) += rho1 * (z1 - u1);
    if (constrained) rhs.bottomRows(nh) += rho2 * feats.transpose() * (z2 - u2);
    const Matrix rq = rhs * q;
    Matrix tq(nh + 1, d);
    for (Eigen::Index j = 0; j < d; ++j) tq.col(j) = systems[j].solve(rq.col(j));
    theta = tq * q.transpose();
    const auto beta = theta.bottomRows(nh);

    const Matrix z1_old = z1;
    z1 = soft_threshold(beta + u1, lambda_beta / rho1);
    u1 += beta - z1;
    const double r1 = (beta - z1).norm();
    const double s1 = rho1 * (z1 - z1_old).norm();

    double r2 = 0.0;
    double s2 = 0.0;
    double fb_norm = 0.0;
    double z2_norm = 0.0;
    double u2_dual = 0.0;
    if (constrained) {
      const Matrix fb = feats * beta;
      const Matrix z2_old = z2;
      z2 = fb + u2;
      project_rows(z2, r);
      u2 += fb - z2;
      r2 = (fb - z2).norm();
      s2 = rho2 * (feats.transpose() * (z2 - z2_old)).norm();
      fb_norm = fb.norm();
      z2_norm = z2.norm();
      u2_dual = rho2 * (feats.transpose() * u2).norm();
    }

    const double primal = std::hypot(r1, r2);
    const double dual = std::hypot(s1, s2);
    const double n_con = static_cast<double>(nh * d + (constrained ? T * d : 0));
    const double eps_pri =
        std::sqrt(n_con) * eps_abs +
        eps_rel * std::max(std::hypot(beta.norm(), fb_norm),
                           std::hypot(z1.norm(), z2_norm));
    const double eps_dual =
        std::sqrt(static_cast<double>((nh + 1) * d)) * eps_abs +
        eps_rel * std::hypot(rho1 * u1.norm(), u2_dual);
    if (primal <= eps_pri && dual <= eps_dual) {
      out.converged = true;
      break;
    }

    // Residual balancing, per block, for a bounded number of adaptations.
    if (it % 10 == 0 && adaptations < 60) {
      bool changed = false;
      auto balance = [&](double pr, double du, double& rho, Matrix& u) {
        if (pr > 10.0 * du) {
          rho *= 2.0;
          u /= 2.0;
          changed = true;
        } else if (du > 10.0 * pr) {
          rho /= 2.0;
          u *= 2.0;
          changed = true;
        }
      };
      balance(r1, s1, rho1, u1);
      if (constrained) balance(r2, s2, rho2, u2);
      if (changed) {
        ++adaptations;
        factor();
      }
    }
  }

  // z1 carries exact zeros; it is the returned slope estimate.
  return finish(z1);
}

}  // namespace flowmoe
