#include "flowmoe/interpret.hpp"

#include <fmt/format.h>

#include "flowmoe/parallel.hpp"

namespace flowmoe {

ComponentSummary ComponentSummary::of(const Matrix& psi) {
  if (psi.rows() == 0) throw UsageError("no component rows to summarize");
  return ComponentSummary{psi.colwise().mean().transpose(),
                          psi.colwise().minCoeff().transpose(),
                          psi.colwise().maxCoeff().transpose()};
}

std::vector<double> sweep_grid(const ComponentSummary& summary, int j, int n) {
  if (j < 0 || j >= summary.mean.size())
    throw UsageError(fmt::format("component index {} out of range", j + 1));
  if (n < 2) throw UsageError("sweep grid needs at least two points");
  std::vector<double> g(static_cast<std::size_t>(n));
  const double lo = summary.min[j];
  const double hi = summary.max[j];
  for (int i = 0; i < n; ++i)
    g[i] = lo + (hi - lo) * static_cast<double>(i) / (n - 1);
  return g;
}

std::vector<PrcPoint> partial_response(const MoEParams& params,
                                       const RandomFeatureMap& rfm,
                                       const PrcRequest& req) {
  const int q = rfm.input_dim();
  if (req.baseline.size() != q)
    throw UsageError(fmt::format("baseline has {} components, model uses {}",
                                 req.baseline.size(), q));
  if (params.feature_dim() != rfm.n_h)
    throw UsageError("model and feature map disagree on the hidden width");
  if (req.sweep_pc < 0 || req.sweep_pc >= q)
    throw UsageError(
        fmt::format("sweep component {} out of range", req.sweep_pc + 1));
  const auto& target = req.target;
  if (target.cluster < 0 || target.cluster >= params.clusters())
    throw UsageError(fmt::format("cluster {} out of range", target.cluster));
  if (target.kind == PrcTarget::Kind::mean &&
      (target.dim < 0 || target.dim >= params.dim()))
    throw UsageError(fmt::format("dimension {} out of range", target.dim));

  Vector base = req.baseline;
  for (const auto& [pc, value] : req.conditioning) {
    if (pc < 0 || pc >= q)
      throw UsageError(fmt::format("conditioning component {} out of range",
                                   pc + 1));
    base[pc] = value;
  }
  if (req.ranges && !req.extrapolate) {
    const double lo = req.ranges->min[req.sweep_pc];
    const double hi = req.ranges->max[req.sweep_pc];
    const double slack = 1e-9 * std::max(1.0, hi - lo);
    for (double x : req.grid)
      if (x < lo - slack || x > hi + slack)
        throw UsageError(fmt::format(
            "sweep value {} outside the observed range [{}, {}]", x, lo, hi));
  }

  std::vector<PrcPoint> out(req.grid.size());
  parallel_for(req.grid.size(), [&](std::size_t i) {
    Vector psi = base;
    psi[req.sweep_pc] = req.grid[i];
    const auto pred = predict(params, hidden_features(rfm, psi));
    const double value = target.kind == PrcTarget::Kind::mean
                             ? pred.mu(target.cluster, target.dim)
                             : pred.pi[target.cluster];
    out[i] = PrcPoint{req.grid[i], value};
  });
  return out;
}

std::vector<std::vector<PrcPoint>> conditional_partial_response(
    const MoEParams& params, const RandomFeatureMap& rfm, PrcRequest req,
    const std::vector<double>& condition_values, int condition_pc) {
  std::vector<std::vector<PrcPoint>> curves;
  curves.reserve(condition_values.size());
  const auto base_conditions = req.conditioning;
  for (double c : condition_values) {
    req.conditioning = base_conditions;
    req.conditioning.emplace_back(condition_pc, c);
    curves.push_back(partial_response(params, rfm, req));
  }
  return curves;
}

}  // namespace flowmoe
