#include "flowmoe/model.hpp"

#include <fmt/format.h>

#include "flowmoe/parallel.hpp"

namespace flowmoe {

MoEParams MoEParams::zeros(int K, int d, int n_h) {
  MoEParams p;
  p.alpha0 = Vector::Zero(K);
  p.alpha = Matrix::Zero(n_h, K);
  p.beta0 = Matrix::Zero(K, d);
  p.beta.assign(K, Matrix::Zero(n_h, d));
  p.sigma.assign(K, Matrix::Identity(d, d));
  return p;
}

void MoEParams::validate() const {
  const int K = clusters();
  if (K < 1) throw UsageError("model needs at least one cluster");
  if (alpha.cols() != K || beta0.rows() != K ||
      static_cast<int>(beta.size()) != K ||
      static_cast<int>(sigma.size()) != K)
    throw UsageError("inconsistent cluster counts in model parameters");
  if (alpha0[K - 1] != 0.0 || !alpha.col(K - 1).isZero(0.0))
    throw UsageError("gating coefficients of the last cluster must be zero");
  for (int k = 0; k < K; ++k) {
    if (beta[k].rows() != alpha.rows() || beta[k].cols() != beta0.cols())
      throw UsageError(fmt::format("beta[{}] has the wrong shape", k));
    if (sigma[k].rows() != dim() || sigma[k].cols() != dim())
      throw UsageError(fmt::format("sigma[{}] has the wrong shape", k));
  }
}

ModelPrediction predict(const MoEParams& params, const Vector& features) {
  if (features.size() != params.feature_dim())
    throw UsageError(fmt::format("expected {} features, got {}",
                                 params.feature_dim(), features.size()));
  const int K = params.clusters();
  ModelPrediction out;
  out.mu.resize(K, params.dim());
  for (int k = 0; k < K; ++k)
    out.mu.row(k) =
        params.beta0.row(k) + features.transpose() * params.beta[k];
  const Vector logits = params.alpha0 + params.alpha.transpose() * features;
  out.pi = softmax(logits);
  return out;
}

std::vector<Matrix> cluster_means(const MoEParams& params,
                                  const Matrix& feats) {
  if (feats.cols() != params.feature_dim())
    throw UsageError(fmt::format("expected {} feature columns, got {}",
                                 params.feature_dim(), feats.cols()));
  std::vector<Matrix> out(params.clusters());
  for (int k = 0; k < params.clusters(); ++k) {
    out[k] = feats * params.beta[k];
    out[k].rowwise() += params.beta0.row(k);
  }
  return out;
}

Matrix gating_logits(const MoEParams& params, const Matrix& feats) {
  if (feats.cols() != params.feature_dim())
    throw UsageError(fmt::format("expected {} feature columns, got {}",
                                 params.feature_dim(), feats.cols()));
  Matrix logits = feats * params.alpha;
  logits.rowwise() += params.alpha0.transpose();
  return logits;
}

double per_cluster_logdensity(const MoEParams& params, const Vector& y,
                              int k) {
  if (k < 0 || k >= params.clusters())
    throw UsageError(fmt::format("cluster index {} out of range", k));
  if (y.size() != params.dim())
    throw UsageError("point dimension does not match the model");
  const GaussianFactor<double> factor(params.sigma[k]);
  return factor.log_density(y - params.beta0.row(k).transpose());
}

double per_cluster_logdensity(const MoEParams& params, const Vector& y, int k,
                              const Vector& features) {
  const auto pred = predict(params, features);
  if (k < 0 || k >= params.clusters())
    throw UsageError(fmt::format("cluster index {} out of range", k));
  if (y.size() != params.dim())
    throw UsageError("point dimension does not match the model");
  const GaussianFactor<double> factor(params.sigma[k]);
  return factor.log_density(y - pred.mu.row(k).transpose());
}

std::vector<GaussianFactor<double>> factorize(const MoEParams& params) {
  std::vector<GaussianFactor<double>> out;
  out.reserve(params.sigma.size());
  for (const auto& s : params.sigma) out.emplace_back(s);
  return out;
}

Vector weighted_loglik_by_time(const MoEParams& params,
                               std::span<const BinnedCytogram> data,
                               const Matrix& feats) {
  if (static_cast<Eigen::Index>(data.size()) != feats.rows())
    throw UsageError(fmt::format("{} cytograms but {} feature rows",
                                 data.size(), feats.rows()));
  params.validate();
  const int K = params.clusters();
  const auto factors = factorize(params);
  const auto means = cluster_means(params, feats);
  const Matrix logits = gating_logits(params, feats);

  Vector by_time = Vector::Zero(static_cast<Eigen::Index>(data.size()));
  parallel_for(data.size(), [&](std::size_t ti) {
    const auto t = static_cast<Eigen::Index>(ti);
    const auto& cell = data[ti];
    if (cell.size() == 0) return;
    const Vector log_pi =
        logits.row(t).transpose().array() - log_sum_exp(logits.row(t));
    Vector terms(K);
    double acc = 0.0;
    for (Eigen::Index b = 0; b < cell.size(); ++b) {
      for (int k = 0; k < K; ++k)
        terms[k] = log_pi[k] + factors[k].log_density(
                                   cell.centers.row(b) - means[k].row(t));
      acc += cell.weights[b] * log_sum_exp(terms);
    }
    by_time[t] = acc;
  });
  return by_time;
}

double log_pseudolikelihood(const MoEParams& params,
                            std::span<const BinnedCytogram> data,
                            const Matrix& feats) {
  const double total = total_weight(data);
  if (!(total > 0.0)) throw DataError("log pseudolikelihood of empty data");
  return weighted_loglik_by_time(params, data, feats).sum() / total;
}

double l1_penalty(const MoEParams& params, double lambda_alpha,
                  double lambda_beta) {
  double pa = 0.0;
  double pb = 0.0;
  if (lambda_alpha > 0.0) pa = lambda_alpha * params.alpha.cwiseAbs().sum();
  if (lambda_beta > 0.0)
    for (const auto& b : params.beta) pb += lambda_beta * b.cwiseAbs().sum();
  return pa + pb;
}

double max_deviation(const MoEParams& params, const Matrix& feats) {
  double worst = 0.0;
  for (const auto& b : params.beta)
    if (feats.rows() > 0)
      worst = std::max(worst, (feats * b).rowwise().norm().maxCoeff());
  return worst;
}

}  // namespace flowmoe
