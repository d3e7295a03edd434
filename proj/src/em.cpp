#include "flowmoe/em.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "flowmoe/parallel.hpp"
#include "flowmoe/rng.hpp"

namespace flowmoe {

void FitConfig::validate() const {
  if (K < 1) throw UsageError("K must be at least 1");
  if (!(r >= 0.0)) throw UsageError("maximum deviation r must be >= 0");
  if (!(lambda_alpha >= 0.0) || !(lambda_beta >= 0.0))
    throw UsageError("penalty weights must be >= 0");
  if (!(tol > 0.0) || !(subsolver_tol > 0.0))
    throw UsageError("tolerances must be positive");
  if (max_iter < 1 || subsolver_max_iter < 1)
    throw UsageError("iteration caps must be positive");
  if (restarts < 1) throw UsageError("restarts must be at least 1");
}

EStepResult e_step(const MoEParams& params,
                   std::span<const BinnedCytogram> data, const Matrix& feats) {
  if (static_cast<Eigen::Index>(data.size()) != feats.rows())
    throw UsageError(fmt::format("{} cytograms but {} feature rows",
                                 data.size(), feats.rows()));
  params.validate();
  const int K = params.clusters();
  const int d = params.dim();
  const auto T = static_cast<Eigen::Index>(data.size());
  const auto factors = factorize(params);
  const auto means = cluster_means(params, feats);
  const Matrix logits = gating_logits(params, feats);

  EStepResult out;
  out.resp.gamma.resize(data.size());
  out.stats.weight = Matrix::Zero(T, K);
  out.stats.ybar.assign(K, Matrix::Zero(T, d));
  out.loglik_by_time = Vector::Zero(T);

  parallel_for(data.size(), [&](std::size_t ti) {
    const auto t = static_cast<Eigen::Index>(ti);
    const auto& cell = data[ti];
    Matrix& gamma = out.resp.gamma[ti];
    gamma.resize(cell.size(), K);
    if (cell.size() == 0) return;
    if (cell.dim() != d)
      throw UsageError(fmt::format("cytogram {} has dimension {}, model has {}",
                                   cell.t, cell.dim(), d));
    const Vector log_pi =
        logits.row(t).transpose().array() - log_sum_exp(logits.row(t));
    Vector terms(K);
    double acc = 0.0;
    for (Eigen::Index b = 0; b < cell.size(); ++b) {
      for (int k = 0; k < K; ++k)
        terms[k] = log_pi[k] + factors[k].log_density(
                                   cell.centers.row(b) - means[k].row(t));
      const double lse = log_sum_exp(terms);
      acc += cell.weights[b] * lse;
      gamma.row(b) = (terms.array() - lse).exp().transpose();
      // Renormalize so rows sum to one beyond exp/log round-off.
      gamma.row(b) /= gamma.row(b).sum();
    }
    out.loglik_by_time[t] = acc;
    for (int k = 0; k < K; ++k) {
      const Vector cg = cell.weights.cwiseProduct(gamma.col(k));
      const double w = cg.sum();
      out.stats.weight(t, k) = w;
      if (w > 0.0)
        out.stats.ybar[k].row(t) = (cg.transpose() * cell.centers) / w;
    }
  });
  out.stats.total = total_weight(data);
  out.loglik = out.loglik_by_time.sum() / out.stats.total;
  return out;
}

Matrix floor_covariance(const Matrix& sigma, double floor) {
  Matrix sym = 0.5 * (sigma + sigma.transpose());
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.eigenvalues().minCoeff() >= floor) return sym;
  const Vector clamped = eig.eigenvalues().cwiseMax(floor);
  sym = eig.eigenvectors() * clamped.asDiagonal() *
        eig.eigenvectors().transpose();
  return 0.5 * (sym + sym.transpose());
}

std::vector<Matrix> m_step_sigma(std::span<const BinnedCytogram> data,
                                 const Responsibilities& resp,
                                 const std::vector<Matrix>& means,
                                 const std::vector<Matrix>& previous) {
  const auto K = means.size();
  std::vector<Matrix> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    const Eigen::Index d = means[k].cols();
    Matrix scatter = Matrix::Zero(d, d);
    double weight = 0.0;
    for (std::size_t ti = 0; ti < data.size(); ++ti) {
      const auto& cell = data[ti];
      if (cell.size() == 0) continue;
      const Vector cg =
          cell.weights.cwiseProduct(resp.gamma[ti].col(static_cast<Eigen::Index>(k)));
      Matrix res = cell.centers;
      res.rowwise() -= means[k].row(static_cast<Eigen::Index>(ti));
      scatter.noalias() += res.transpose() * cg.asDiagonal() * res;
      weight += cg.sum();
    }
    out[k] = weight > 0.0 ? floor_covariance(scatter / weight) : previous[k];
  }
  return out;
}

namespace {

struct PooledPoints {
  Matrix points;
  Vector weights;
};

PooledPoints pool(std::span<const BinnedCytogram> data) {
  Eigen::Index n = 0;
  Eigen::Index d = 0;
  for (const auto& c : data) {
    n += c.size();
    if (c.size() > 0) d = c.dim();
  }
  PooledPoints p;
  p.points.resize(n, d);
  p.weights.resize(n);
  Eigen::Index row = 0;
  for (const auto& c : data) {
    if (c.size() == 0) continue;
    p.points.middleRows(row, c.size()) = c.centers;
    p.weights.segment(row, c.size()) = c.weights;
    row += c.size();
  }
  return p;
}

std::size_t count_distinct(const Matrix& points, std::size_t cap) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index i = 0; i < points.rows() && seen.size() < cap; ++i) {
    const Vector row = points.row(i).transpose();
    seen.emplace(row.data(), row.data() + row.size());
  }
  return seen.size();
}

Eigen::Index sample_index(const Vector& cumulative, double u) {
  const double target = u * cumulative[cumulative.size() - 1];
  const auto* begin = cumulative.data();
  const auto* end = begin + cumulative.size();
  const auto* it = std::upper_bound(begin, end, target);
  return std::min<Eigen::Index>(it - begin, cumulative.size() - 1);
}

}  // namespace

MoEParams initialize(std::span<const BinnedCytogram> data, const Matrix& feats,
                     int K, std::uint64_t seed) {
  if (K < 1) throw UsageError("K must be at least 1");
  const auto p = pool(data);
  const Eigen::Index n = p.points.rows();
  const Eigen::Index d = p.points.cols();
  if (n == 0 || !(p.weights.sum() > 0.0))
    throw DataError("cannot fit a model to data with zero total weight");
  if (count_distinct(p.points, static_cast<std::size_t>(K)) <
      static_cast<std::size_t>(K))
    throw DataError(
        fmt::format("K = {} exceeds the number of distinct data points", K));

  CounterRng rng(seed, /*stream=*/0x1417);
  Matrix centers(K, d);
  Vector cumulative(n);
  std::partial_sum(p.weights.begin(), p.weights.end(), cumulative.begin());
  centers.row(0) = p.points.row(sample_index(cumulative, rng.uniform()));
  Vector dist2 = (p.points.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int k = 1; k < K; ++k) {
    const Vector score = p.weights.cwiseProduct(dist2);
    std::partial_sum(score.begin(), score.end(), cumulative.begin());
    centers.row(k) = p.points.row(sample_index(cumulative, rng.uniform()));
    dist2 = dist2.cwiseMin(
        (p.points.rowwise() - centers.row(k)).rowwise().squaredNorm());
  }

  // Weighted Lloyd refinement.
  std::vector<int> label(static_cast<std::size_t>(n), -1);
  for (int sweep = 0; sweep < 50; ++sweep) {
    bool moved = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centers.rowwise() - p.points.row(i)).rowwise().squaredNorm().minCoeff(
          &best);
      if (label[i] != static_cast<int>(best)) {
        label[i] = static_cast<int>(best);
        moved = true;
      }
    }
    if (!moved && sweep > 0) break;
    Matrix sums = Matrix::Zero(K, d);
    Vector mass = Vector::Zero(K);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(label[i]) += p.weights[i] * p.points.row(i);
      mass[label[i]] += p.weights[i];
    }
    for (int k = 0; k < K; ++k)
      if (mass[k] > 0.0) centers.row(k) = sums.row(k) / mass[k];
  }

  const double total = p.weights.sum();
  const RowVector mean = (p.weights.transpose() * p.points) / total;
  const Matrix centered = p.points.rowwise() - mean;
  const RowVector var =
      (p.weights.transpose() * centered.array().square().matrix()) / total;

  MoEParams params = MoEParams::zeros(K, static_cast<int>(d),
                                      static_cast<int>(feats.cols()));
  params.beta0 = centers;
  for (int k = 0; k < K; ++k)
    params.sigma[k] = floor_covariance(Matrix(var.transpose().asDiagonal()));
  return params;
}

double penalized_objective(const MoEParams& params,
                           std::span<const BinnedCytogram> data,
                           const Matrix& feats, double lambda_alpha,
                           double lambda_beta) {
  return -log_pseudolikelihood(params, data, feats) +
         l1_penalty(params, lambda_alpha, lambda_beta);
}

namespace {

// Point with the largest weighted negative log density; used to re-seed a
// cluster that lost all of its weight.
std::pair<std::size_t, Eigen::Index> worst_fit_point(
    std::span<const BinnedCytogram> data, const MoEParams& params,
    const Matrix& feats) {
  const auto factors = factorize(params);
  const auto means = cluster_means(params, feats);
  const Matrix logits = gating_logits(params, feats);
  double worst = -std::numeric_limits<double>::infinity();
  std::pair<std::size_t, Eigen::Index> arg{0, 0};
  Vector terms(params.clusters());
  for (std::size_t ti = 0; ti < data.size(); ++ti) {
    const auto t = static_cast<Eigen::Index>(ti);
    const auto& cell = data[ti];
    const Vector log_pi =
        logits.row(t).transpose().array() - log_sum_exp(logits.row(t));
    for (Eigen::Index b = 0; b < cell.size(); ++b) {
      for (int k = 0; k < params.clusters(); ++k)
        terms[k] = log_pi[k] + factors[k].log_density(cell.centers.row(b) -
                                                      means[k].row(t));
      const double score = -cell.weights[b] * log_sum_exp(terms);
      if (score > worst) {
        worst = score;
        arg = {ti, b};
      }
    }
  }
  return arg;
}

}  // namespace

RunResult run_em(std::span<const BinnedCytogram> data, const Matrix& feats,
                 const FitConfig& cfg, MoEParams start) {
  cfg.validate();
  const int K = cfg.K;
  const SubsolverOptions sub{cfg.subsolver_tol, cfg.subsolver_max_iter};

  RunResult run;
  run.params = std::move(start);
  run.params.validate();
  EStepResult es = e_step(run.params, data, feats);
  const double total = es.stats.total;
  if (!(total > 0.0)) throw DataError("all data weights are zero");
  auto objective_of = [&](const EStepResult& e, const MoEParams& p) {
    return -e.loglik + l1_penalty(p, cfg.lambda_alpha, cfg.lambda_beta);
  };
  double current = objective_of(es, run.params);
  run.objective_trace.push_back(current);
  run.deviation_trace.push_back(max_deviation(run.params, feats));

  for (int it = 1; it <= cfg.max_iter; ++it) {
    run.iterations = it;
    MoEParams next = run.params;

    const auto gating = m_step_gating(es.stats.weight, feats, cfg.lambda_alpha,
                                      next.alpha0, next.alpha, sub);
    next.alpha0 = gating.alpha0;
    next.alpha = gating.alpha;
    if (!gating.converged) ++run.subsolver_warnings;

    std::vector<int> empty;
    for (int k = 0; k < K; ++k) {
      const double wk = es.stats.weight.col(k).sum();
      if (wk < 1e-8 * total) {
        empty.push_back(k);
        continue;
      }
      const auto means = m_step_means(
          es.stats.weight.col(k), es.stats.ybar[k], feats, next.sigma[k],
          total, cfg.lambda_beta, cfg.r, next.beta0.row(k), next.beta[k], sub);
      next.beta0.row(k) = means.beta0;
      next.beta[k] = means.beta;
      if (!means.converged) ++run.subsolver_warnings;
    }

    auto sigma = m_step_sigma(data, es.resp, cluster_means(next, feats),
                              next.sigma);
    for (int k : empty) sigma[k] = next.sigma[k];
    next.sigma = std::move(sigma);

    EStepResult next_es = e_step(next, data, feats);
    double next_objective = objective_of(next_es, next);

    // Re-seed collapsed clusters, keeping the change only when it does not
    // increase the objective.
    if (!empty.empty()) {
      MoEParams rescued = next;
      const Matrix pooled_sigma = [&] {
        Matrix s = Matrix::Zero(next.dim(), next.dim());
        for (const auto& sk : next.sigma) s += sk;
        return Matrix(s / K);
      }();
      for (int k : empty) {
        const auto [ti, b] = worst_fit_point(data, rescued, feats);
        rescued.beta0.row(k) = data[ti].centers.row(b);
        rescued.beta[k].setZero();
        rescued.sigma[k] = pooled_sigma;
      }
      EStepResult rescued_es = e_step(rescued, data, feats);
      const double rescued_objective = objective_of(rescued_es, rescued);
      if (rescued_objective <= next_objective) {
        next = std::move(rescued);
        next_es = std::move(rescued_es);
        next_objective = rescued_objective;
        ++run.rescues;
      }
    }

    const double previous = current;
    run.params = std::move(next);
    es = std::move(next_es);
    current = next_objective;
    run.objective_trace.push_back(current);
    run.deviation_trace.push_back(max_deviation(run.params, feats));

    if (std::abs(previous - current) <
        cfg.tol * std::max(std::abs(previous), 1e-8)) {
      run.converged = true;
      break;
    }
  }
  return run;
}

FitResult fit(std::span<const BinnedCytogram> data, const Matrix& feats,
              const FitConfig& cfg) {
  cfg.validate();
  if (static_cast<Eigen::Index>(data.size()) != feats.rows())
    throw UsageError(fmt::format("{} cytograms but {} feature rows",
                                 data.size(), feats.rows()));
  if (!(total_weight(data) > 0.0))
    throw DataError("all data weights are zero");

  const auto n = static_cast<std::size_t>(cfg.restarts);
  std::vector<MoEParams> starts(n);
  for (std::size_t i = 0; i < n; ++i)
    starts[i] = initialize(data, feats, cfg.K, derive_seed(cfg.seed, i));

  // EM is deterministic given its start, so restarts whose initializations
  // coincide share one run.
  std::vector<std::size_t> source(n);
  for (std::size_t i = 0; i < n; ++i) {
    source[i] = i;
    for (std::size_t j = 0; j < i; ++j) {
      if (source[j] == j && starts[j].beta0 == starts[i].beta0 &&
          starts[j].sigma == starts[i].sigma) {
        source[i] = j;
        break;
      }
    }
  }
  std::vector<std::size_t> unique;
  for (std::size_t i = 0; i < n; ++i)
    if (source[i] == i) unique.push_back(i);

  std::vector<RunResult> runs(n);
  parallel_for(unique.size(), [&](std::size_t u) {
    const auto i = unique[u];
    runs[i] = run_em(data, feats, cfg, starts[i]);
  });

  FitResult out;
  std::size_t best = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& run = runs[source[i]];
    out.restart_objectives.push_back(run.objective_trace.back());
    if (run.objective_trace.back() <
        runs[source[best]].objective_trace.back())
      best = i;
  }
  auto& winner = runs[source[best]];
  out.params = winner.params;
  out.objective_trace = winner.objective_trace;
  out.deviation_trace = winner.deviation_trace;
  out.converged = winner.converged;
  out.restart_index = static_cast<int>(best);
  out.subsolver_warnings = winner.subsolver_warnings;
  return out;
}

}  // namespace flowmoe
