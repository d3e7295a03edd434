#include "flowmoe/cv.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "flowmoe/parallel.hpp"
#include "flowmoe/rng.hpp"

namespace flowmoe {

std::vector<Eigen::Index> FoldSpec::test_rows(int fold) const {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] == fold) rows.push_back(static_cast<Eigen::Index>(i));
  return rows;
}

std::vector<Eigen::Index> FoldSpec::train_rows(int fold) const {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] != fold) rows.push_back(static_cast<Eigen::Index>(i));
  return rows;
}

FoldSpec make_folds(int T, int block_size, int n_folds) {
  if (n_folds < 2)
    throw UsageError("cross-validation needs at least two folds");
  if (block_size < 1) throw UsageError("block size must be at least 1");
  if (T < n_folds)
    throw UsageError(
        fmt::format("{} time points cannot fill {} folds", T, n_folds));
  FoldSpec spec;
  spec.T = T;
  spec.block_size = block_size;
  spec.n_folds = n_folds;
  spec.assignment.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const int block = t / block_size;  // 0-based block index
    spec.assignment[t] = block % n_folds + 1;
  }
  return spec;
}

void CvGrid::validate() const {
  auto check = [](const std::vector<double>& g, const char* name) {
    if (g.empty()) throw UsageError(fmt::format("{} grid is empty", name));
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(g[i] >= 0.0) || !std::isfinite(g[i]))
        throw UsageError(fmt::format("{} grid values must be finite and >= 0",
                                     name));
      if (i > 0 && !(g[i] < g[i - 1]))
        throw UsageError(
            fmt::format("{} grid must be strictly decreasing", name));
    }
  };
  check(lambda_alpha, "lambda_alpha");
  check(lambda_beta, "lambda_beta");
}

CvGrid CvGrid::log_spaced(double lambda_alpha_max, double lambda_beta_max,
                          int n, double min_ratio) {
  if (n < 1) throw UsageError("grid needs at least one point");
  auto make = [&](double top) {
    top = std::max(top, 1e-12);
    std::vector<double> g(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double frac = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
      g[i] = top * std::pow(min_ratio, frac);
    }
    return g;
  };
  return CvGrid{make(lambda_alpha_max), make(lambda_beta_max)};
}

FeatureSource fixed_features(Matrix feats) {
  return [feats = std::move(feats)](std::span<const Eigen::Index>,
                                    std::uint64_t) {
    return SplitFeatures{feats, std::nullopt};
  };
}

FeatureSource per_split_features(Matrix covariates, FeatureSpec spec) {
  return [x = std::move(covariates), spec](
             std::span<const Eigen::Index> train_rows, std::uint64_t split_id) {
    FeatureSpec local = spec;
    local.seed = derive_seed(spec.seed, split_id);
    auto pipeline = fit_pipeline(select_rows(x, train_rows), local);
    Matrix feats = pipeline.transform(x);
    return SplitFeatures{std::move(feats), std::move(pipeline)};
  };
}

FeatureSource global_features(const Matrix& covariates,
                              const FeatureSpec& spec) {
  auto pipeline = fit_pipeline(covariates, spec);
  Matrix feats = pipeline.transform(covariates);
  return [feats = std::move(feats), pipeline = std::move(pipeline)](
             std::span<const Eigen::Index>, std::uint64_t) {
    return SplitFeatures{feats, pipeline};
  };
}

LambdaMax lambda_max(std::span<const BinnedCytogram> data, const Matrix& feats,
                     const FitConfig& cfg_base) {
  FitConfig cfg = cfg_base;
  cfg.lambda_alpha = 1e6;
  cfg.lambda_beta = 1e6;
  const auto fitted = fit(data, feats, cfg);
  const auto es = e_step(fitted.params, data, feats);

  LambdaMax out;
  Vector g0;
  Matrix ga;
  gating_gradient(es.stats.weight, feats, fitted.params.alpha0,
                  fitted.params.alpha, g0, ga);
  out.alpha = ga.size() > 0 ? ga.cwiseAbs().maxCoeff() : 0.0;

  for (int k = 0; k < fitted.params.clusters(); ++k) {
    const Matrix precision =
        fitted.params.sigma[k].llt().solve(
            Matrix::Identity(fitted.params.dim(), fitted.params.dim()));
    RowVector gb0;
    Matrix gb;
    means_gradient(es.stats.weight.col(k), es.stats.ybar[k], feats, precision,
                   es.stats.total, fitted.params.beta0.row(k),
                   fitted.params.beta[k], gb0, gb);
    if (gb.size() > 0) out.beta = std::max(out.beta, gb.cwiseAbs().maxCoeff());
  }
  return out;
}

double heldout_nlpl(const MoEParams& params,
                    std::span<const BinnedCytogram> test, const Matrix& feats) {
  return -log_pseudolikelihood(params, test, feats);
}

CvResult cross_validate(std::span<const BinnedCytogram> data,
                        const FeatureSource& features,
                        const FitConfig& cfg_base, const CvGrid& grid,
                        const FoldSpec& folds, const CvOptions& opts) {
  grid.validate();
  if (folds.T != static_cast<int>(data.size()))
    throw UsageError(fmt::format("fold spec covers {} time points, data has {}",
                                 folds.T, data.size()));
  if (folds.n_folds < 2)
    throw UsageError("cross-validation needs at least two folds");

  const int n_folds = folds.n_folds;
  std::vector<Matrix> fold_feats(static_cast<std::size_t>(n_folds));
  for (int f = 1; f <= n_folds; ++f) {
    const auto train = folds.train_rows(f);
    fold_feats[f - 1] =
        features(train,
                 derive_seed(opts.split_salt, static_cast<std::uint64_t>(f)))
            .feats;
  }

  const std::size_t na = grid.lambda_alpha.size();
  const std::size_t nb = grid.lambda_beta.size();
  const std::size_t cells = na * nb;
  std::vector<CvRow> rows(cells * static_cast<std::size_t>(n_folds));

  auto fit_cell = [&](int f, std::size_t cell, const MoEParams* warm,
                      const std::vector<BinnedCytogram>& train_data,
                      const Matrix& train_feats,
                      const std::vector<BinnedCytogram>& test_data,
                      const Matrix& test_feats) {
    FitConfig cfg = cfg_base;
    cfg.lambda_alpha = grid.lambda_alpha[cell / nb];
    cfg.lambda_beta = grid.lambda_beta[cell % nb];
    try {
      MoEParams params = warm ? run_em(train_data, train_feats, cfg, *warm).params
                              : fit(train_data, train_feats, cfg).params;
      rows[cell * n_folds + (f - 1)] =
          CvRow{cfg.lambda_alpha, cfg.lambda_beta, f,
                heldout_nlpl(params, test_data, test_feats)};
      return params;
    } catch (const std::exception& e) {
      throw SolverError(fmt::format(
          "fold {} (lambda_alpha={}, lambda_beta={}): {}", f, cfg.lambda_alpha,
          cfg.lambda_beta, e.what()));
    }
  };

  if (opts.warm_path) {
    parallel_for(static_cast<std::size_t>(n_folds), [&](std::size_t fi) {
      const int f = static_cast<int>(fi) + 1;
      const auto train = folds.train_rows(f);
      const auto test = folds.test_rows(f);
      const Matrix& all = fold_feats[fi];
      const auto train_data = select(data, train);
      const auto test_data = select(data, test);
      const Matrix train_feats = select_rows(all, train);
      const Matrix test_feats = select_rows(all, test);
      // Row-major walk; each row starts from the first cell of the row above.
      std::vector<MoEParams> row_start;
      MoEParams prev;
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const std::size_t ib = cell % nb;
        const MoEParams* warm = nullptr;
        if (cell > 0) warm = ib == 0 ? &row_start.back() : &prev;
        prev = fit_cell(f, cell, warm, train_data, train_feats, test_data,
                        test_feats);
        if (ib == 0) row_start.push_back(prev);
      }
    });
  } else {
    parallel_for(rows.size(), [&](std::size_t job) {
      const std::size_t cell = job / n_folds;
      const int f = static_cast<int>(job % n_folds) + 1;
      const auto train = folds.train_rows(f);
      const auto test = folds.test_rows(f);
      const Matrix& all = fold_feats[f - 1];
      fit_cell(f, cell, nullptr, select(data, train), select_rows(all, train),
               select(data, test), select_rows(all, test));
    });
  }

  CvResult out;
  out.table = rows;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t cell = 0; cell < na * nb; ++cell) {
    double sum = 0.0;
    for (int f = 0; f < n_folds; ++f) sum += rows[cell * n_folds + f].nlpl;
    const double mean = sum / n_folds;
    out.cell_means.push_back(CvRow{grid.lambda_alpha[cell / nb],
                                   grid.lambda_beta[cell % nb], 0, mean});
    // Grids are decreasing, so the first cell among near-ties carries the
    // larger penalties.
    if (mean < best - 1e-12 * std::abs(best) || cell == 0) {
      best = mean;
      out.best_lambda_alpha = grid.lambda_alpha[cell / nb];
      out.best_lambda_beta = grid.lambda_beta[cell % nb];
    }
  }
  return out;
}

NestedCvResult nested_cv(std::span<const BinnedCytogram> data,
                         const FeatureSource& features,
                         const FitConfig& cfg_base,
                         const NestedCvOptions& opts) {
  const int T = static_cast<int>(data.size());
  const auto outer = make_folds(T, opts.block_size, opts.n_folds);
  NestedCvResult out;
  for (int j = 1; j <= outer.n_folds; ++j) {
    const auto train = outer.train_rows(j);
    const auto test = outer.test_rows(j);
    const auto train_data = select(data, train);
    const std::uint64_t outer_id = derive_seed(0x6e657374, j);

    // Inner splits index the outer training rows; map them back before
    // asking the source for features.
    FeatureSource inner = [&](std::span<const Eigen::Index> inner_train,
                              std::uint64_t split_id) {
      std::vector<Eigen::Index> mapped;
      mapped.reserve(inner_train.size());
      for (auto r : inner_train) mapped.push_back(train[r]);
      auto sf = features(mapped, split_id);
      sf.feats = select_rows(sf.feats, train);
      return sf;
    };

    const auto outer_feats = features(train, outer_id).feats;
    const Matrix train_feats = select_rows(outer_feats, train);
    CvGrid grid;
    if (opts.grid) {
      grid = *opts.grid;
    } else {
      const auto lm = lambda_max(train_data, train_feats, cfg_base);
      grid = CvGrid::log_spaced(lm.alpha, lm.beta, opts.grid_points);
    }
    const auto inner_folds =
        make_folds(static_cast<int>(train.size()), opts.block_size,
                   opts.n_folds);
    const auto cv = cross_validate(train_data, inner, cfg_base, grid,
                                   inner_folds,
                                   CvOptions{outer_id, opts.warm_path});

    FitConfig cfg = cfg_base;
    cfg.lambda_alpha = cv.best_lambda_alpha;
    cfg.lambda_beta = cv.best_lambda_beta;
    const auto fitted = fit(train_data, train_feats, cfg);
    const auto test_data = select(data, test);
    out.outer_nlpl.push_back(
        heldout_nlpl(fitted.params, test_data, select_rows(outer_feats, test)));
    out.selected_lambda_alpha.push_back(cfg.lambda_alpha);
    out.selected_lambda_beta.push_back(cfg.lambda_beta);
  }
  double sum = 0.0;
  for (double v : out.outer_nlpl) sum += v;
  out.mean_nlpl = sum / static_cast<double>(out.outer_nlpl.size());
  return out;
}

}  // namespace flowmoe
