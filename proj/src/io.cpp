#include "flowmoe/io.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <limits>

namespace flowmoe {

namespace {

// JSON has no infinity; an unbounded radius is stored as null.
json finite_or_null(double v) { return std::isinf(v) ? json(nullptr) : json(v); }
double from_finite_or_null(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows)
    throw DataError("matrix row count does not match its data");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(data[i].size()) != cols)
      throw DataError("matrix column count does not match its data");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = data[i][c].get<double>();
  }
  return m;
}

json vector_to_json(const Vector& v) {
  return json(std::vector<double>(v.data(), v.data() + v.size()));
}

Vector vector_from_json(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(),
                                  static_cast<Eigen::Index>(values.size()));
}

json to_json(const MoEParams& p) {
  json beta = json::array();
  json sigma = json::array();
  for (const auto& b : p.beta) beta.push_back(matrix_to_json(b));
  for (const auto& s : p.sigma) sigma.push_back(matrix_to_json(s));
  return json{{"K", p.clusters()},
              {"d", p.dim()},
              {"n_h", p.feature_dim()},
              {"alpha0", vector_to_json(p.alpha0)},
              {"alpha", matrix_to_json(p.alpha)},
              {"beta0", matrix_to_json(p.beta0)},
              {"beta", beta},
              {"sigma", sigma}};
}

MoEParams params_from_json(const json& j) {
  MoEParams p;
  p.alpha0 = vector_from_json(j.at("alpha0"));
  p.alpha = matrix_from_json(j.at("alpha"));
  p.beta0 = matrix_from_json(j.at("beta0"));
  for (const auto& b : j.at("beta")) p.beta.push_back(matrix_from_json(b));
  for (const auto& s : j.at("sigma")) p.sigma.push_back(matrix_from_json(s));
  p.validate();
  return p;
}

json to_json(const FeaturePipeline& p) {
  return json{{"means", vector_to_json(p.standardizer.means)},
              {"scales", vector_to_json(p.standardizer.scales)},
              {"loadings", matrix_to_json(p.pca.loadings)},
              {"explained", vector_to_json(p.pca.explained)},
              {"q", p.pca.q},
              {"W", matrix_to_json(p.rfm.weights)},
              {"a", p.rfm.a},
              {"n_h", p.rfm.n_h},
              {"activation", to_string(p.rfm.activation)},
              {"linear_variant", p.rfm.linear_variant},
              {"seed", p.rfm.seed}};
}

FeaturePipeline pipeline_from_json(const json& j) {
  FeaturePipeline p;
  p.standardizer.means = vector_from_json(j.at("means"));
  p.standardizer.scales = vector_from_json(j.at("scales"));
  p.pca.loadings = matrix_from_json(j.at("loadings"));
  p.pca.explained = vector_from_json(j.at("explained"));
  p.pca.q = j.at("q").get<int>();
  p.rfm.weights = matrix_from_json(j.at("W"));
  p.rfm.a = j.at("a").get<double>();
  p.rfm.n_h = j.at("n_h").get<int>();
  p.rfm.activation = activation_from_string(j.at("activation").get<std::string>());
  p.rfm.linear_variant = j.value("linear_variant", false);
  p.rfm.seed = j.at("seed").get<std::uint64_t>();
  if (p.rfm.weights.rows() != p.pca.q + 1 || p.rfm.weights.cols() != p.rfm.n_h)
    throw DataError("pipeline hidden weights have the wrong shape");
  return p;
}

json to_json(const FitConfig& c) {
  return json{{"K", c.K},
              {"r", finite_or_null(c.r)},
              {"lambda_alpha", c.lambda_alpha},
              {"lambda_beta", c.lambda_beta},
              {"tol", c.tol},
              {"max_iter", c.max_iter},
              {"restarts", c.restarts},
              {"seed", c.seed},
              {"subsolver_tol", c.subsolver_tol},
              {"subsolver_max_iter", c.subsolver_max_iter}};
}

FitConfig fit_config_from_json(const json& j) {
  FitConfig c;
  c.K = j.at("K").get<int>();
  c.r = from_finite_or_null(j.at("r"));
  c.lambda_alpha = j.at("lambda_alpha").get<double>();
  c.lambda_beta = j.at("lambda_beta").get<double>();
  c.tol = j.at("tol").get<double>();
  c.max_iter = j.at("max_iter").get<int>();
  c.restarts = j.at("restarts").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.subsolver_tol = j.at("subsolver_tol").get<double>();
  c.subsolver_max_iter = j.at("subsolver_max_iter").get<int>();
  return c;
}

json to_json(const BinGrid& g) {
  return json{{"lo", vector_to_json(g.lo)},
              {"hi", vector_to_json(g.hi)},
              {"bins", g.bins}};
}

BinGrid grid_from_json(const json& j) {
  BinGrid g;
  g.lo = vector_from_json(j.at("lo"));
  g.hi = vector_from_json(j.at("hi"));
  g.bins = j.at("bins").get<int>();
  g.validate();
  return g;
}

json to_json(const SavedModel& m) {
  json out{{"format", "flowmoe-model"},
           {"version", 1},
           {"K", m.params.clusters()},
           {"d", m.params.dim()},
           {"n_h", m.params.feature_dim()},
           {"normalization", "total_weight"},
           {"params", to_json(m.params)},
           {"pipeline", to_json(m.pipeline)},
           {"config", to_json(m.config)},
           {"components",
            {{"mean", vector_to_json(m.components.mean)},
             {"min", vector_to_json(m.components.min)},
             {"max", vector_to_json(m.components.max)}}},
           {"objective", m.objective},
           {"converged", m.converged},
           {"restart_index", m.restart_index}};
  out["grid"] = m.grid ? to_json(*m.grid) : json(nullptr);
  return out;
}

SavedModel saved_model_from_json(const json& j) {
  if (j.value("format", "") != "flowmoe-model")
    throw DataError("not a flowmoe model document");
  SavedModel m;
  m.params = params_from_json(j.at("params"));
  m.pipeline = pipeline_from_json(j.at("pipeline"));
  m.config = fit_config_from_json(j.at("config"));
  if (!j.at("grid").is_null()) m.grid = grid_from_json(j.at("grid"));
  const auto& c = j.at("components");
  m.components.mean = vector_from_json(c.at("mean"));
  m.components.min = vector_from_json(c.at("min"));
  m.components.max = vector_from_json(c.at("max"));
  m.objective = j.at("objective").get<double>();
  m.converged = j.at("converged").get<bool>();
  m.restart_index = j.at("restart_index").get<int>();
  if (m.params.feature_dim() != m.pipeline.rfm.n_h)
    throw DataError("model and pipeline disagree on the hidden width");
  return m;
}

void save_json(const std::filesystem::path& path, const json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void save_model(const std::filesystem::path& path, const SavedModel& m) {
  save_json(path, to_json(m));
}

SavedModel load_model(const std::filesystem::path& path) {
  try {
    return saved_model_from_json(load_json(path));
  } catch (const json::exception& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace flowmoe
