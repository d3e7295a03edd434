#include "flowmoe/figure3.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "flowmoe/parallel.hpp"
#include "flowmoe/rng.hpp"

namespace flowmoe {

Figure3Options default_figure3_options() {
  Figure3Options o;
  o.fit.K = 2;
  o.fit.restarts = 10;
  o.fit.tol = 1e-6;
  o.fit.max_iter = 300;
  o.fit.subsolver_tol = 1e-6;
  o.fit.subsolver_max_iter = 1000;
  return o;
}

std::string setting_label(const Figure3Options::Setting& s) {
  if (s.config == SimConfig::both_linear) return to_string(s.config);
  return to_string(s.config) + "/" + to_string(s.kind);
}

double oracle_nlpl(const SimTruth& truth, std::span<const Cytogram> test,
                   double noise_sd) {
  const double log_norm =
      -0.5 * std::log(2.0 * std::numbers::pi * noise_sd * noise_sd);
  double acc = 0.0;
  double total = 0.0;
  for (std::size_t ti = 0; ti < test.size(); ++ti) {
    const auto& c = test[ti];
    const double p1 = truth.pi1[static_cast<Eigen::Index>(ti)];
    const double m1 = truth.mu1[static_cast<Eigen::Index>(ti)];
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      const double y = c.points(i, 0);
      const double z1 = (y - m1) / noise_sd;
      const double z2 = (y - truth.mu2) / noise_sd;
      Eigen::Vector2d terms(std::log(p1) + log_norm - 0.5 * z1 * z1,
                            std::log1p(-p1) + log_norm - 0.5 * z2 * z2);
      acc += c.weights[i] * log_sum_exp(terms);
      total += c.weights[i];
    }
  }
  return -acc / total;
}

namespace {

struct Job {
  std::size_t setting = 0;
  std::size_t delta = 0;
  std::size_t seed = 0;
};

std::vector<Figure3Row> run_job(const Figure3Options& opts, const Matrix& psi,
                                const Job& job) {
  const auto& setting = opts.settings[job.setting];
  const double delta = opts.deltas[job.delta];
  const std::uint64_t seed = opts.seeds[job.seed];

  auto scenario = SimScenario::make(setting.config, setting.kind, delta,
                                    opts.n_per_time, derive_seed(seed, 1));
  const auto train = generate(scenario, psi);
  scenario.seed = derive_seed(seed, 2);
  const auto test = generate(scenario, psi);

  const auto grid = default_grid(train.cytograms, opts.bins);
  const auto train_binned = bin_all(train.cytograms, grid);
  const auto test_raw = as_binned(test.cytograms);
  const double oracle = oracle_nlpl(test.truth, test.cytograms, scenario.noise_sd);
  const auto folds = make_folds(static_cast<int>(psi.rows()), opts.block_size,
                                opts.n_folds);

  std::vector<Figure3Row> rows;
  for (const bool nonlinear : {false, true}) {
    FeatureSpec spec;
    spec.components_given = true;
    spec.n_h = opts.n_h;
    spec.a = opts.a;
    spec.activation = nonlinear ? Activation::logistic : Activation::identity;
    spec.linear_variant = !nonlinear;
    spec.seed = derive_seed(opts.feature_seed, seed);
    const auto pipeline = fit_pipeline(psi, spec);
    const Matrix feats = pipeline.transform(psi);

    FitConfig cfg = opts.fit;
    cfg.seed = derive_seed(seed, nonlinear ? 4 : 3);
    const auto lm = lambda_max(train_binned, feats, cfg);
    const auto cv_grid = CvGrid::log_spaced(lm.alpha, lm.beta, opts.grid_points,
                                            opts.grid_min_ratio);
    const auto cv = cross_validate(train_binned, fixed_features(feats), cfg,
                                   cv_grid, folds,
                                   CvOptions{seed, opts.warm_path});
    cfg.lambda_alpha = cv.best_lambda_alpha;
    cfg.lambda_beta = cv.best_lambda_beta;
    const auto fitted = fit(train_binned, feats, cfg);
    const double test_nlpl = heldout_nlpl(fitted.params, test_raw, feats);

    Figure3Row row;
    row.config = setting_label(setting);
    row.delta = delta;
    row.seed = seed;
    row.model = nonlinear ? "nonlinear" : "linear";
    row.test_nlpl = test_nlpl;
    row.oracle_nlpl = oracle;
    row.excess_nlpl = test_nlpl - oracle;
    row.lambda_alpha = cfg.lambda_alpha;
    row.lambda_beta = cfg.lambda_beta;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

std::vector<Figure3Row> replicate_figure3(const Figure3Options& opts,
                                          const Matrix& psi,
                                          const Figure3Progress& progress) {
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < opts.settings.size(); ++s)
    for (std::size_t d = 0; d < opts.deltas.size(); ++d)
      for (std::size_t k = 0; k < opts.seeds.size(); ++k)
        jobs.push_back(Job{s, d, k});

  std::vector<std::vector<Figure3Row>> results(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    results[j] = run_job(opts, psi, jobs[j]);
    if (progress)
      for (const auto& row : results[j]) progress(row);
  });

  std::vector<Figure3Row> rows;
  for (auto& r : results) rows.insert(rows.end(), r.begin(), r.end());
  return rows;
}

std::vector<Figure3Summary> summarize(const std::vector<Figure3Row>& rows) {
  std::map<std::tuple<std::string, double, std::string>, std::vector<double>>
      groups;
  std::vector<std::tuple<std::string, double, std::string>> order;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.config, r.delta, r.model);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(r.excess_nlpl);
  }
  std::vector<Figure3Summary> out;
  for (const auto& key : order) {
    auto values = groups[key];
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    const double median =
        n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
    out.push_back(Figure3Summary{std::get<0>(key), std::get<1>(key),
                                 std::get<2>(key), median});
  }
  return out;
}

}  // namespace flowmoe
