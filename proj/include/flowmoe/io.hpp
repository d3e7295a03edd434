#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "flowmoe/data.hpp"
#include "flowmoe/em.hpp"
#include "flowmoe/features.hpp"
#include "flowmoe/interpret.hpp"
#include "flowmoe/model.hpp"

namespace flowmoe {

using json = nlohmann::json;

// Everything needed to evaluate or interpret a fitted model on new data.
struct SavedModel {
  MoEParams params;
  FeaturePipeline pipeline;
  FitConfig config;
  std::optional<BinGrid> grid;
  ComponentSummary components;
  double objective = 0.0;
  bool converged = false;
  int restart_index = 0;
};

json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);
json vector_to_json(const Vector& v);
Vector vector_from_json(const json& j);

json to_json(const MoEParams& p);
MoEParams params_from_json(const json& j);
json to_json(const FeaturePipeline& p);
FeaturePipeline pipeline_from_json(const json& j);
json to_json(const FitConfig& c);
FitConfig fit_config_from_json(const json& j);
json to_json(const BinGrid& g);
BinGrid grid_from_json(const json& j);

json to_json(const SavedModel& m);
SavedModel saved_model_from_json(const json& j);

void save_model(const std::filesystem::path& path, const SavedModel& m);
SavedModel load_model(const std::filesystem::path& path);

void save_json(const std::filesystem::path& path, const json& j);
json load_json(const std::filesystem::path& path);

}  // namespace flowmoe
