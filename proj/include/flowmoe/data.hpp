#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowmoe/types.hpp"

namespace flowmoe {

// Particles observed in one time slot. `points` is n_t x d, `weights` holds
// the per-particle biomass.
struct Cytogram {
  int t = 0;
  Matrix points;
  Vector weights;

  Eigen::Index size() const { return points.rows(); }
  Eigen::Index dim() const { return points.cols(); }
};

// One covariate row per time slot, in the same order as the cytograms.
struct CovariateMatrix {
  std::vector<int> times;
  Matrix values;  // T x p

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
};

// Occupied cells of a regular grid with their summed biomass.
struct BinnedCytogram {
  int t = 0;
  Matrix centers;  // m_t x d
  Vector weights;

  Eigen::Index size() const { return centers.rows(); }
  Eigen::Index dim() const { return centers.cols(); }
  double total_weight() const { return weights.sum(); }
};

struct Dataset {
  std::vector<Cytogram> cytograms;
  CovariateMatrix covariates;

  Eigen::Index dim() const;
};

struct BinGrid {
  Vector lo;
  Vector hi;
  int bins = 40;

  Eigen::Index dim() const { return lo.size(); }
  void validate() const;
};

// Reads the particle and covariate CSVs. Every covariate row becomes one
// cytogram (possibly empty); particles referencing a time with no covariate
// row are rejected.
Dataset ingest_dataset(const std::filesystem::path& cytogram_file,
                       const std::filesystem::path& covariate_file);

// Per-dimension min/max over all particles, widened by `expand` of the range
// on each side.
BinGrid default_grid(std::span<const Cytogram> cytograms, int bins,
                     double expand = 0.01);

// Assigns in-range particles to grid cells. Particles outside [lo, hi] are
// dropped and counted in *dropped when provided.
BinnedCytogram bin_cytogram(const Cytogram& c, const BinGrid& grid,
                            std::size_t* dropped = nullptr);

std::vector<BinnedCytogram> bin_all(std::span<const Cytogram> cytograms,
                                    const BinGrid& grid,
                                    std::size_t* dropped = nullptr);

// Treats each particle as its own cell (no aggregation).
BinnedCytogram as_binned(const Cytogram& c);
std::vector<BinnedCytogram> as_binned(std::span<const Cytogram> cytograms);

// Keeps the entries at `rows` (0-based positions) in order.
std::vector<BinnedCytogram> select(std::span<const BinnedCytogram> data,
                                   std::span<const Eigen::Index> rows);
Matrix select_rows(const Matrix& m, std::span<const Eigen::Index> rows);

double total_weight(std::span<const BinnedCytogram> data);

// CSV writers. Output goes through a temporary file and a rename.
void write_cytograms_csv(const std::filesystem::path& path,
                         std::span<const Cytogram> cytograms);
void write_binned_csv(const std::filesystem::path& path,
                      std::span<const BinnedCytogram> binned);
void write_covariates_csv(const std::filesystem::path& path,
                          const CovariateMatrix& covariates);

// Headered numeric CSV with a leading `time` column.
struct NumericTable {
  std::vector<std::string> header;
  std::vector<int> times;
  Matrix values;  // columns after `time`
};
NumericTable read_numeric_csv(const std::filesystem::path& path);

// Writes `contents` to `path` atomically (temp file + rename).
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& contents);

}  // namespace flowmoe
