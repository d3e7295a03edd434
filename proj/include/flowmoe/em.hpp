#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "flowmoe/data.hpp"
#include "flowmoe/model.hpp"

namespace flowmoe {

inline constexpr double kCovarianceFloor = 1e-10;

struct FitConfig {
  int K = 2;
  double r = std::numeric_limits<double>::infinity();
  double lambda_alpha = 0.0;
  double lambda_beta = 0.0;
  double tol = 1e-6;
  int max_iter = 300;
  int restarts = 10;
  std::uint64_t seed = 0;
  double subsolver_tol = 1e-8;
  int subsolver_max_iter = 2000;

  void validate() const;
};

// Posterior membership of each cell, one m_t x K matrix per time.
struct Responsibilities {
  std::vector<Matrix> gamma;
};

// Weighted sufficient statistics of an E-step:
//   weight(t, k) = sum_b c_b gamma_btk
//   ybar[k].row(t) = sum_b c_b gamma_btk y_b / weight(t, k)  (0 if weight is 0)
struct SufficientStats {
  Matrix weight;
  std::vector<Matrix> ybar;
  double total = 0.0;  // C, the total data weight
};

struct EStepResult {
  Responsibilities resp;
  SufficientStats stats;
  Vector loglik_by_time;  // sum_b c_b log f(y_b), per time
  double loglik = 0.0;    // normalized by C
};

EStepResult e_step(const MoEParams& params,
                   std::span<const BinnedCytogram> data, const Matrix& feats);

struct SubsolverOptions {
  double tol = 1e-8;
  int max_iter = 2000;
};

struct GatingResult {
  Vector alpha0;
  Matrix alpha;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  bool accepted = true;  // false when the warm start was kept
};

// Smooth part of the gating block,
//   -(1 / C) sum_t sum_k gamma_bar(t, k) log pi_tk(alpha),
// with C = gamma_bar.sum(); the last cluster is the anchor.
double gating_loss(const Matrix& gamma_bar, const Matrix& feats,
                   const Vector& alpha0, const Matrix& alpha);
// Gradient with respect to (alpha0, alpha); anchor entries are zero.
void gating_gradient(const Matrix& gamma_bar, const Matrix& feats,
                     const Vector& alpha0, const Matrix& alpha,
                     Vector& grad_alpha0, Matrix& grad_alpha);

// L1-penalized multinomial logistic regression by accelerated proximal
// gradient with backtracking. Intercepts are not penalized.
GatingResult m_step_gating(const Matrix& gamma_bar, const Matrix& feats,
                           double lambda_alpha, const Vector& warm_alpha0,
                           const Matrix& warm_alpha,
                           const SubsolverOptions& opts = {});

struct MeansResult {
  RowVector beta0;  // 1 x d
  Matrix beta;      // n_h x d
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  bool accepted = true;
};

// Smooth part of the mean block for one cluster,
//   (1 / (2C)) sum_t w_t (ybar_t - beta0 - beta' f_t)' S (ybar_t - ...),
// where S is the inverse covariance.
double means_loss(const Vector& weight, const Matrix& ybar, const Matrix& feats,
                  const Matrix& precision, double total,
                  const RowVector& beta0, const Matrix& beta);
void means_gradient(const Vector& weight, const Matrix& ybar,
                    const Matrix& feats, const Matrix& precision, double total,
                    const RowVector& beta0, const Matrix& beta,
                    RowVector& grad_beta0, Matrix& grad_beta);

// Ball-constrained lasso for one cluster's mean regression, by ADMM with an
// L1 consensus block and a block projecting the fitted deviations beta' f_t
// onto the radius-r ball. The returned coefficients are exactly feasible.
MeansResult m_step_means(const Vector& weight, const Matrix& ybar,
                         const Matrix& feats, const Matrix& sigma,
                         double total, double lambda_beta, double r,
                         const RowVector& warm_beta0, const Matrix& warm_beta,
                         const SubsolverOptions& opts = {});

// Weighted scatter around the fitted means, symmetrized, with eigenvalues
// floored at kCovarianceFloor. `means` holds one T x d matrix per cluster.
// Clusters with zero total weight keep `previous`.
std::vector<Matrix> m_step_sigma(std::span<const BinnedCytogram> data,
                                 const Responsibilities& resp,
                                 const std::vector<Matrix>& means,
                                 const std::vector<Matrix>& previous);

// Clamps the spectrum of a symmetric matrix from below.
Matrix floor_covariance(const Matrix& sigma, double floor = kCovarianceFloor);

// Weighted k-means++ seeding (biomass as sampling weight) refined by weighted
// Lloyd iterations; zero slopes, zero gating, pooled diagonal covariance.
MoEParams initialize(std::span<const BinnedCytogram> data, const Matrix& feats,
                     int K, std::uint64_t seed);

struct RunResult {
  MoEParams params;
  std::vector<double> objective_trace;
  std::vector<double> deviation_trace;  // max_{k,t} ||beta_k' f_t|| per entry
  bool converged = false;
  int iterations = 0;
  int subsolver_warnings = 0;
  int rescues = 0;
};

struct FitResult {
  MoEParams params;
  std::vector<double> objective_trace;
  std::vector<double> deviation_trace;
  bool converged = false;
  int restart_index = 0;
  std::vector<double> restart_objectives;
  int subsolver_warnings = 0;

  double objective() const { return objective_trace.back(); }
};

// Penalized objective -loglik / C + L1 penalties.
double penalized_objective(const MoEParams& params,
                           std::span<const BinnedCytogram> data,
                           const Matrix& feats, double lambda_alpha,
                           double lambda_beta);

// One EM run from the given starting point.
RunResult run_em(std::span<const BinnedCytogram> data, const Matrix& feats,
                 const FitConfig& cfg, MoEParams start);

// cfg.restarts independently seeded runs; returns the one with the lowest
// final penalized objective (lowest restart index on ties).
FitResult fit(std::span<const BinnedCytogram> data, const Matrix& feats,
              const FitConfig& cfg);

}  // namespace flowmoe
