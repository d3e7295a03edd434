#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "flowmoe/data.hpp"
#include "flowmoe/em.hpp"
#include "flowmoe/features.hpp"

namespace flowmoe {

// Blocked fold assignment: consecutive time points form blocks of
// `block_size`, and block j (1-based) goes to fold ((j - 1) mod n_folds) + 1.
struct FoldSpec {
  int T = 0;
  int block_size = 20;
  int n_folds = 5;
  std::vector<int> assignment;  // 1-based fold label per 0-based time position

  std::vector<Eigen::Index> test_rows(int fold) const;
  std::vector<Eigen::Index> train_rows(int fold) const;
};

FoldSpec make_folds(int T, int block_size, int n_folds);

struct CvGrid {
  std::vector<double> lambda_alpha;
  std::vector<double> lambda_beta;

  void validate() const;
  // `n` log-spaced values per penalty from max down to min_ratio * max.
  static CvGrid log_spaced(double lambda_alpha_max, double lambda_beta_max,
                           int n, double min_ratio = 1e-4);
};

// Features for every time point, built only from the training rows of a split.
struct SplitFeatures {
  Matrix feats;  // T x n_h
  std::optional<FeaturePipeline> pipeline;
};
using FeatureSource = std::function<SplitFeatures(
    std::span<const Eigen::Index> train_rows, std::uint64_t split_id)>;

// The same feature matrix for every split.
FeatureSource fixed_features(Matrix feats);

// Refits standardizer and PCA on each split's training rows and redraws the
// hidden weights from a seed derived from (spec.seed, split_id).
FeatureSource per_split_features(Matrix covariates, FeatureSpec spec);

// Fits the pipeline once on all covariates (no per-split refit).
FeatureSource global_features(const Matrix& covariates, const FeatureSpec& spec);

// Smallest penalties that zero every slope, from the gradients at the
// slope-free fit.
struct LambdaMax {
  double alpha = 0.0;
  double beta = 0.0;
};
LambdaMax lambda_max(std::span<const BinnedCytogram> data, const Matrix& feats,
                     const FitConfig& cfg_base);

struct CvRow {
  double lambda_alpha = 0.0;
  double lambda_beta = 0.0;
  int fold = 0;
  double nlpl = 0.0;
};

struct CvResult {
  double best_lambda_alpha = 0.0;
  double best_lambda_beta = 0.0;
  std::vector<CvRow> table;       // one row per (cell, fold)
  std::vector<CvRow> cell_means;  // fold = 0, nlpl averaged over folds
};

// Held-out negative log pseudolikelihood, normalized by the held-out weight.
double heldout_nlpl(const MoEParams& params,
                    std::span<const BinnedCytogram> test, const Matrix& feats);

struct CvOptions {
  // Keeps split seeds distinct when called inside an outer loop.
  std::uint64_t split_salt = 0;
  // Within a fold, only the first grid cell gets all restarts; every later
  // cell runs one EM from its predecessor's solution along the path.
  bool warm_path = false;
};

// Grid search with blocked folds. The winner minimizes the mean held-out
// NLPL; near-ties (relative 1e-12) go to the larger penalties.
CvResult cross_validate(std::span<const BinnedCytogram> data,
                        const FeatureSource& features,
                        const FitConfig& cfg_base, const CvGrid& grid,
                        const FoldSpec& folds, const CvOptions& opts = {});

struct NestedCvResult {
  std::vector<double> outer_nlpl;
  std::vector<double> selected_lambda_alpha;
  std::vector<double> selected_lambda_beta;
  double mean_nlpl = 0.0;
};

struct NestedCvOptions {
  int block_size = 20;
  int n_folds = 5;
  // Used for every outer split when set; otherwise a default log-spaced grid
  // is derived from each outer training set.
  std::optional<CvGrid> grid;
  int grid_points = 5;
  bool warm_path = false;
};

// Outer blocked folds; for each, inner CV on the complement selects the
// penalties, the model is refit on the complement and scored on the held-out
// fold. Returns the average held-out NLPL.
NestedCvResult nested_cv(std::span<const BinnedCytogram> data,
                         const FeatureSource& features,
                         const FitConfig& cfg_base,
                         const NestedCvOptions& opts = {});

}  // namespace flowmoe
