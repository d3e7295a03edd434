#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowmoe/data.hpp"

namespace flowmoe {

enum class FunctionKind { linear, interaction, quadratic, logistic };
enum class SimConfig { both_linear, nonlinear_probability, nonlinear_mean };

std::string to_string(FunctionKind k);
std::string to_string(SimConfig c);
FunctionKind function_kind_from_string(const std::string& s);
SimConfig sim_config_from_string(const std::string& s);

// Cluster-1 mean as a function of the first and fourth components.
double mean_function(FunctionKind kind, double psi1, double psi4);
// Cluster-1 probability as a function of the first and second components.
double prob_function(FunctionKind kind, double psi1, double psi2);
// The logit of prob_function, before the inverse-logit.
double prob_logit(FunctionKind kind, double psi1, double psi2);

struct SimScenario {
  SimConfig config = SimConfig::both_linear;
  FunctionKind mean_kind = FunctionKind::linear;
  FunctionKind prob_kind = FunctionKind::linear;
  double delta = 0.0;
  int n_per_time = 1000;
  double noise_sd = 0.2;
  double delta_sign = 1.0;  // +1 puts cluster 2 above the cluster-1 average
  std::uint64_t seed = 0;

  // Forces the function kinds implied by `config`.
  void validate() const;
  static SimScenario make(SimConfig config, FunctionKind nonlinear_kind,
                          double delta, int n_per_time, std::uint64_t seed);
};

struct SimTruth {
  Vector mu1;  // T
  double mu2 = 0.0;
  Vector pi1;  // T
};

struct SimDataset {
  std::vector<Cytogram> cytograms;  // d = 1, unit weights
  SimTruth truth;
  Matrix psi;
};

// Truth only, without particles.
SimTruth simulate_truth(const SimScenario& scenario, const Matrix& psi);

SimDataset generate(const SimScenario& scenario, const Matrix& psi);

// `n_points` equally spaced signal sizes on [0, 0.95].
std::vector<double> signal_grid(int n_points);

// Deterministic stand-in for a real T x q component matrix: PC1 is a slow
// latitude-like sweep over roughly [-6, 5], PC2 a persistent wander, PC4 a
// daily cycle, the rest smaller autocorrelated noise with decreasing scale.
Matrix synthetic_components(int T, int q, std::uint64_t seed);

}  // namespace flowmoe
