#include <fmt/format.h>

#include <cmath>

#include "flowmoe/em.hpp"

namespace flowmoe {

namespace {

Matrix logits_of(const Matrix& feats, const Vector& alpha0,
                 const Matrix& alpha) {
  Matrix eta = feats * alpha;
  eta.rowwise() += alpha0.transpose();
  return eta;
}

double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

struct Coefficients {
  Vector a0;
  Matrix a;
};

}  // namespace

double gating_loss(const Matrix& gamma_bar, const Matrix& feats,
                   const Vector& alpha0, const Matrix& alpha) {
  const double total = gamma_bar.sum();
  if (!(total > 0.0)) return 0.0;
  const Matrix eta = logits_of(feats, alpha0, alpha);
  double acc = 0.0;
  for (Eigen::Index t = 0; t < eta.rows(); ++t) {
    const double n_t = gamma_bar.row(t).sum();
    if (n_t == 0.0) continue;
    acc += gamma_bar.row(t).dot(eta.row(t)) - n_t * log_sum_exp(eta.row(t));
  }
  return -acc / total;
}

void gating_gradient(const Matrix& gamma_bar, const Matrix& feats,
                     const Vector& alpha0, const Matrix& alpha,
                     Vector& grad_alpha0, Matrix& grad_alpha) {
  const double total = gamma_bar.sum();
  const Eigen::Index K = alpha0.size();
  const Matrix eta = logits_of(feats, alpha0, alpha);
  Matrix g(eta.rows(), K);
  for (Eigen::Index t = 0; t < eta.rows(); ++t) {
    const double n_t = gamma_bar.row(t).sum();
    const Vector p = softmax(eta.row(t).transpose());
    g.row(t) = (n_t * p.transpose() - gamma_bar.row(t)) / total;
  }
  g.col(K - 1).setZero();
  grad_alpha0 = g.colwise().sum().transpose();
  grad_alpha = feats.transpose() * g;
}

GatingResult m_step_gating(const Matrix& gamma_bar, const Matrix& feats,
                           double lambda_alpha, const Vector& warm_alpha0,
                           const Matrix& warm_alpha,
                           const SubsolverOptions& opts) {
  const Eigen::Index K = warm_alpha0.size();
  if (gamma_bar.cols() != K || gamma_bar.rows() != feats.rows() ||
      warm_alpha.rows() != feats.cols() || warm_alpha.cols() != K)
    throw UsageError("gating subproblem dimensions do not agree");
  if ((gamma_bar.array() < 0.0).any())
    throw UsageError("gating weights must be non-negative");

  auto objective = [&](const Coefficients& c) {
    return gating_loss(gamma_bar, feats, c.a0, c.a) +
           lambda_alpha * c.a.cwiseAbs().sum();
  };

  GatingResult out;
  Coefficients x{warm_alpha0, warm_alpha};
  x.a0[K - 1] = 0.0;
  x.a.col(K - 1).setZero();
  const double warm_objective = objective(x);
  const double total = gamma_bar.sum();
  if (K == 1 || !(total > 0.0)) {
    out.alpha0 = x.a0;
    out.alpha = x.a;
    out.objective = warm_objective;
    out.converged = true;
    return out;
  }

  // Lipschitz bound of the multinomial loss: (1 / 2C) sum_t n_t ||(1, f_t)||^2.
  double lipschitz = 0.0;
  for (Eigen::Index t = 0; t < feats.rows(); ++t)
    lipschitz += gamma_bar.row(t).sum() * (1.0 + feats.row(t).squaredNorm());
  lipschitz /= 2.0 * total;
  double step = 1.0 / std::max(lipschitz, 1e-300);

  Coefficients y = x;
  double fx = warm_objective;
  double momentum = 1.0;
  Vector g0;
  Matrix ga;
  for (int it = 1; it <= opts.max_iter; ++it) {
    out.iterations = it;
    const double gy = gating_loss(gamma_bar, feats, y.a0, y.a);
    gating_gradient(gamma_bar, feats, y.a0, y.a, g0, ga);

    Coefficients cand;
    double residual = 0.0;
    while (true) {
      cand.a0 = y.a0 - step * g0;
      cand.a = (y.a - step * ga)
                   .unaryExpr([&](double v) {
                     return soft_threshold(v, step * lambda_alpha);
                   });
      cand.a0[K - 1] = 0.0;
      cand.a.col(K - 1).setZero();
      const Vector d0 = cand.a0 - y.a0;
      const Matrix da = cand.a - y.a;
      const double quad = gy + g0.dot(d0) + (ga.array() * da.array()).sum() +
                          (d0.squaredNorm() + da.squaredNorm()) / (2.0 * step);
      const double gc = gating_loss(gamma_bar, feats, cand.a0, cand.a);
      if (gc <= quad + 1e-15 * std::abs(gy)) {
        residual = std::max(d0.cwiseAbs().maxCoeff(),
                            da.cwiseAbs().maxCoeff()) /
                   step;
        break;
      }
      step *= 0.5;
      if (step < 1e-30)
        throw SolverError(fmt::format(
            "gating line search failed at iteration {} (loss {})", it, gy));
    }

    const double fc = objective(cand);
    if (fc > fx) {
      // A plain proximal step cannot increase the objective, so an increase
      // without momentum means round-off stagnation.
      if (momentum == 1.0) {
        out.converged = residual < opts.tol;
        break;
      }
      // Momentum overshoot: restart from the last accepted iterate.
      y = x;
      momentum = 1.0;
      continue;
    }
    const double next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
    const double beta = (momentum - 1.0) / next;
    y.a0 = cand.a0 + beta * (cand.a0 - x.a0);
    y.a = cand.a + beta * (cand.a - x.a);
    momentum = next;
    x = std::move(cand);
    fx = fc;
    if (residual < opts.tol) {
      out.converged = true;
      break;
    }
    step *= 1.25;
  }

  if (fx <= warm_objective) {
    out.alpha0 = std::move(x.a0);
    out.alpha = std::move(x.a);
    out.objective = fx;
  } else {
    out.alpha0 = warm_alpha0;
    out.alpha = warm_alpha;
    out.objective = warm_objective;
    out.accepted = false;
  }
  return out;
}

}  // namespace flowmoe
