#include "flowmoe/simgen.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "flowmoe/parallel.hpp"
#include "flowmoe/rng.hpp"

namespace flowmoe {

std::string to_string(FunctionKind k) {
  switch (k) {
    case FunctionKind::linear: return "linear";
    case FunctionKind::interaction: return "interaction";
    case FunctionKind::quadratic: return "quadratic";
    case FunctionKind::logistic: return "logistic";
  }
  return "?";
}

std::string to_string(SimConfig c) {
  switch (c) {
    case SimConfig::both_linear: return "both-linear";
    case SimConfig::nonlinear_probability: return "nonlinear-prob";
    case SimConfig::nonlinear_mean: return "nonlinear-mean";
  }
  return "?";
}

FunctionKind function_kind_from_string(const std::string& s) {
  if (s == "linear") return FunctionKind::linear;
  if (s == "interaction") return FunctionKind::interaction;
  if (s == "quadratic") return FunctionKind::quadratic;
  if (s == "logistic") return FunctionKind::logistic;
  throw UsageError(fmt::format("unknown function kind '{}'", s));
}

SimConfig sim_config_from_string(const std::string& s) {
  if (s == "both-linear" || s == "both_linear") return SimConfig::both_linear;
  if (s == "nonlinear-prob" || s == "nonlinear_probability")
    return SimConfig::nonlinear_probability;
  if (s == "nonlinear-mean" || s == "nonlinear_mean")
    return SimConfig::nonlinear_mean;
  throw UsageError(fmt::format("unknown simulation config '{}'", s));
}

double mean_function(FunctionKind kind, double psi1, double psi4) {
  switch (kind) {
    case FunctionKind::linear:
      return 1.0 + 0.015 * psi1 + 0.035 * psi4;
    case FunctionKind::interaction:
      return 1.05707 + 0.015 * psi1 + 0.02 * psi4 + 0.003 * psi1 * psi4;
    case FunctionKind::quadratic:
      return 1.030392 + 0.015 * psi1 + 0.01 * psi4 * std::abs(psi4);
    case FunctionKind::logistic:
      return 1.089606 - 0.15 / (1.0 + std::exp(psi1)) + 0.035 * psi4;
  }
  return 0.0;
}

double prob_logit(FunctionKind kind, double psi1, double psi2) {
  switch (kind) {
    case FunctionKind::linear:
      return -0.4 * psi1 + 0.1 * psi2;
    case FunctionKind::interaction:
      return -0.4 * psi1 + 0.02 * psi1 * psi2;
    case FunctionKind::quadratic:
      return -0.4 * psi1 - 0.05 * psi2 * psi2;
    case FunctionKind::logistic:
      return -2.0 + 4.5 / (1.0 + std::exp(psi1)) + 0.1 * psi2;
  }
  return 0.0;
}

double prob_function(FunctionKind kind, double psi1, double psi2) {
  const double eta = prob_logit(kind, psi1, psi2);
  return eta >= 0.0 ? 1.0 / (1.0 + std::exp(-eta))
                    : std::exp(eta) / (1.0 + std::exp(eta));
}

void SimScenario::validate() const {
  if (config == SimConfig::both_linear &&
      (mean_kind != FunctionKind::linear || prob_kind != FunctionKind::linear))
    throw UsageError("both-linear requires linear mean and probability");
  if (config == SimConfig::nonlinear_probability &&
      mean_kind != FunctionKind::linear)
    throw UsageError("nonlinear-prob requires a linear mean");
  if (config == SimConfig::nonlinear_mean && prob_kind != FunctionKind::linear)
    throw UsageError("nonlinear-mean requires a linear probability");
  if (!(delta >= 0.0) || !std::isfinite(delta))
    throw UsageError("signal size must be finite and non-negative");
  if (n_per_time < 0) throw UsageError("particles per time must be >= 0");
  if (!(noise_sd > 0.0)) throw UsageError("noise sd must be positive");
}

SimScenario SimScenario::make(SimConfig config, FunctionKind nonlinear_kind,
                              double delta, int n_per_time,
                              std::uint64_t seed) {
  SimScenario s;
  s.config = config;
  s.delta = delta;
  s.n_per_time = n_per_time;
  s.seed = seed;
  if (config == SimConfig::nonlinear_mean) s.mean_kind = nonlinear_kind;
  if (config == SimConfig::nonlinear_probability) s.prob_kind = nonlinear_kind;
  return s;
}

SimTruth simulate_truth(const SimScenario& scenario, const Matrix& psi) {
  scenario.validate();
  if (psi.rows() == 0) throw UsageError("component matrix has no rows");
  if (psi.cols() < 4)
    throw UsageError("component matrix needs at least four columns");
  const Eigen::Index T = psi.rows();
  SimTruth truth;
  truth.mu1.resize(T);
  truth.pi1.resize(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    truth.mu1[t] = mean_function(scenario.mean_kind, psi(t, 0), psi(t, 3));
    truth.pi1[t] = prob_function(scenario.prob_kind, psi(t, 0), psi(t, 1));
  }
  truth.mu2 = truth.mu1.mean() + scenario.delta_sign * scenario.delta;
  return truth;
}

SimDataset generate(const SimScenario& scenario, const Matrix& psi) {
  SimDataset ds;
  ds.truth = simulate_truth(scenario, psi);
  ds.psi = psi;
  const Eigen::Index T = psi.rows();
  ds.cytograms.resize(static_cast<std::size_t>(T));
  parallel_for(static_cast<std::size_t>(T), [&](std::size_t ti) {
    const auto t = static_cast<Eigen::Index>(ti);
    CounterRng rng(scenario.seed, ti + 1);
    auto& c = ds.cytograms[ti];
    c.t = static_cast<int>(ti) + 1;
    c.points.resize(scenario.n_per_time, 1);
    c.weights = Vector::Ones(scenario.n_per_time);
    for (int i = 0; i < scenario.n_per_time; ++i) {
      const bool first = rng.bernoulli(ds.truth.pi1[t]);
      const double mean = first ? ds.truth.mu1[t] : ds.truth.mu2;
      c.points(i, 0) = rng.normal(mean, scenario.noise_sd);
    }
  });
  return ds;
}

std::vector<double> signal_grid(int n_points) {
  if (n_points < 2) throw UsageError("signal grid needs at least two points");
  std::vector<double> g(static_cast<std::size_t>(n_points));
  for (int i = 0; i < n_points; ++i)
    g[i] = 0.95 * (static_cast<double>(i) / (n_points - 1));
  return g;
}

Matrix synthetic_components(int T, int q, std::uint64_t seed) {
  if (T < 1 || q < 4)
    throw UsageError("synthetic components need T >= 1 and q >= 4");
  CounterRng rng(seed, 0x5053);
  Matrix psi(T, q);
  const double pi = std::numbers::pi;
  // AR(1) paths with persistence phi and stationary sd `scale`.
  auto ar1 = [&](int col, double phi, double scale) {
    double v = rng.normal(0.0, scale);
    const double innov = scale * std::sqrt(1.0 - phi * phi);
    for (int t = 0; t < T; ++t) {
      psi(t, col) = v;
      v = phi * v + rng.normal(0.0, innov);
    }
  };
  ar1(1, 0.97, 2.0);
  ar1(2, 0.9, 1.5);
  for (int j = 4; j < q; ++j) ar1(j, 0.8, 1.2 / (j - 2));
  const double span = std::max(T - 1, 1);
  for (int t = 0; t < T; ++t) {
    // Northbound then southbound transect.
    const double phase = static_cast<double>(t) / span;
    psi(t, 0) = -6.0 + 11.0 * std::sin(pi * phase) + 0.3 * psi(t, 2) / 1.5;
    psi(t, 3) = 2.5 * std::sin(2.0 * pi * t / 24.0) + rng.normal(0.0, 0.4);
  }
  return psi;
}

}  // namespace flowmoe
