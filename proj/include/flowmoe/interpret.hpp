#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "flowmoe/features.hpp"
#include "flowmoe/model.hpp"

namespace flowmoe {

// Time averages and observed ranges of the training components.
struct ComponentSummary {
  Vector mean;
  Vector min;
  Vector max;

  static ComponentSummary of(const Matrix& psi);
};

struct PrcTarget {
  enum class Kind { mean, probability };
  Kind kind = Kind::mean;
  int cluster = 0;
  int dim = 0;
};

struct PrcRequest {
  PrcTarget target;
  int sweep_pc = 0;  // 0-based component index
  std::vector<double> grid;
  std::vector<std::pair<int, double>> conditioning;  // (component, value)
  Vector baseline;
  std::optional<ComponentSummary> ranges;  // enables the range check
  bool extrapolate = false;
};

struct PrcPoint {
  double x = 0.0;
  double value = 0.0;
};

// `n` equally spaced points over the observed range of component j.
std::vector<double> sweep_grid(const ComponentSummary& summary, int j, int n);

// Sets component `sweep_pc` to each grid value, fixes the conditioned
// components, holds the others at the baseline, and reads the target off
// predict().
std::vector<PrcPoint> partial_response(const MoEParams& params,
                                       const RandomFeatureMap& rfm,
                                       const PrcRequest& req);

// One curve per value of the conditioning component (PC1 by default).
std::vector<std::vector<PrcPoint>> conditional_partial_response(
    const MoEParams& params, const RandomFeatureMap& rfm, PrcRequest req,
    const std::vector<double>& condition_values, int condition_pc = 0);

}  // namespace flowmoe
