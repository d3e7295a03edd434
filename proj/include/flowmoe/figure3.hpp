#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "flowmoe/cv.hpp"
#include "flowmoe/simgen.hpp"

namespace flowmoe {

// Simulation study comparing the linear (identity activation) and nonlinear
// (logistic activation) models by held-out NLPL in excess of the generating
// model's NLPL.
struct Figure3Options {
  struct Setting {
    SimConfig config = SimConfig::both_linear;
    FunctionKind kind = FunctionKind::linear;  // nonlinear kind, if any
  };
  std::vector<Setting> settings = {
      {SimConfig::both_linear, FunctionKind::linear},
      {SimConfig::nonlinear_probability, FunctionKind::logistic},
      {SimConfig::nonlinear_mean, FunctionKind::interaction}};
  std::vector<double> deltas = signal_grid(5);
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  int n_per_time = 200;
  int bins = 40;
  int block_size = 20;
  int n_folds = 5;
  int grid_points = 3;
  double grid_min_ratio = 1e-2;
  bool warm_path = true;
  FitConfig fit;  // K, r, tolerances and restarts; penalties come from CV
  int n_h = 70;
  double a = 0.5;
  std::uint64_t feature_seed = 7;
};

Figure3Options default_figure3_options();

struct Figure3Row {
  std::string config;
  double delta = 0.0;
  std::uint64_t seed = 0;
  std::string model;  // "linear" or "nonlinear"
  double test_nlpl = 0.0;
  double oracle_nlpl = 0.0;
  double excess_nlpl = 0.0;
  double lambda_alpha = 0.0;
  double lambda_beta = 0.0;
};

std::string setting_label(const Figure3Options::Setting& s);

// NLPL of the generating two-component model on `test`.
double oracle_nlpl(const SimTruth& truth, std::span<const Cytogram> test,
                   double noise_sd);

using Figure3Progress = std::function<void(const Figure3Row&)>;

// For every setting, signal size and seed: simulate train and test sets with
// the same components, select penalties by blocked CV, refit, and score both
// models on the raw test particles.
std::vector<Figure3Row> replicate_figure3(const Figure3Options& opts,
                                          const Matrix& psi,
                                          const Figure3Progress& progress = {});

struct Figure3Summary {
  std::string config;
  double delta = 0.0;
  std::string model;
  double median_excess = 0.0;
};

// Median excess NLPL over seeds per (config, delta, model).
std::vector<Figure3Summary> summarize(const std::vector<Figure3Row>& rows);

}  // namespace flowmoe
