#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "flowmoe/cv.hpp"
#include "flowmoe/data.hpp"
#include "flowmoe/em.hpp"
#include "flowmoe/features.hpp"
#include "flowmoe/figure3.hpp"
#include "flowmoe/interpret.hpp"
#include "flowmoe/io.hpp"
#include "flowmoe/parallel.hpp"
#include "flowmoe/rng.hpp"
#include "flowmoe/simgen.hpp"

namespace flowmoe::cli {
namespace {

namespace fs = std::filesystem;

constexpr const char* kVersion = "1.0.0";

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
  bool verbose = false;
  std::string manifest;
};

// Data, binning and model options shared by fit, cv and nested-cv.
struct ModelArgs {
  std::string cytograms;
  std::string covariates;
  int k = 2;
  std::string r = "inf";
  int nh = 70;
  double a = 0.5;
  std::string activation = "logistic";
  bool random_identity = false;
  double pca_threshold = 0.95;
  int q = 0;
  bool components_given = false;
  int restarts = 10;
  double tol = 1e-6;
  int max_iter = 300;
  double subsolver_tol = 1e-8;
  int subsolver_max_iter = 2000;
  int bins = 40;
  std::string lo;
  std::string hi;
  std::string emit_binned;
};

void add_model_options(CLI::App* sub, ModelArgs& m) {
  sub->add_option("--cytograms", m.cytograms, "particle CSV (time,y1..yd,biomass)")
      ->required();
  sub->add_option("--covariates", m.covariates, "covariate CSV (time,x1..xp)")
      ->required();
  sub->add_option("--k", m.k, "number of clusters")->capture_default_str();
  sub->add_option("--r", m.r, "maximum deviation of each cluster mean (inf for none)")
      ->capture_default_str();
  sub->add_option("--nh", m.nh, "hidden units")->capture_default_str();
  sub->add_option("--a", m.a, "hidden weights drawn from Unif(-a, a)")
      ->capture_default_str();
  sub->add_option("--activation", m.activation,
                  "logistic, or identity for the linear model")
      ->check(CLI::IsMember({"logistic", "identity"}))
      ->capture_default_str();
  sub->add_flag("--identity-random-weights", m.random_identity,
                "with identity activation, keep the random hidden layer");
  sub->add_option("--pca-threshold", m.pca_threshold,
                  "cumulative explained-variance threshold")
      ->capture_default_str();
  sub->add_option("--q", m.q, "fixed number of components (overrides threshold)");
  sub->add_flag("--components-given", m.components_given,
                "covariates are already principal components");
  sub->add_option("--restarts", m.restarts)->capture_default_str();
  sub->add_option("--tol", m.tol, "relative objective tolerance")
      ->capture_default_str();
  sub->add_option("--max-iter", m.max_iter)->capture_default_str();
  sub->add_option("--subsolver-tol", m.subsolver_tol)->capture_default_str();
  sub->add_option("--subsolver-max-iter", m.subsolver_max_iter)
      ->capture_default_str();
  sub->add_option("--bins", m.bins, "bins per dimension")->capture_default_str();
  sub->add_option("--lo", m.lo, "grid lower bounds, comma separated");
  sub->add_option("--hi", m.hi, "grid upper bounds, comma separated");
  sub->add_option("--emit-binned", m.emit_binned, "write the binned data CSV");
}

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(fmt::format("{}: '{}' is not a number", what, item));
    }
  }
  if (out.empty()) throw UsageError(fmt::format("{}: empty list", what));
  return out;
}

double parse_radius(const std::string& s) {
  if (s == "inf" || s == "Inf" || s == "infinity")
    return std::numeric_limits<double>::infinity();
  const auto v = parse_list(s, "--r");
  if (v.size() != 1 || v[0] < 0.0)
    throw UsageError("--r must be a non-negative number or inf");
  return v[0];
}

FeatureSpec feature_spec(const ModelArgs& m, std::uint64_t seed) {
  FeatureSpec spec;
  spec.pca_threshold = m.pca_threshold;
  if (m.q > 0) spec.fixed_q = m.q;
  spec.n_h = m.nh;
  spec.a = m.a;
  spec.activation = activation_from_string(m.activation);
  spec.linear_variant =
      spec.activation == Activation::identity && !m.random_identity;
  spec.seed = derive_seed(seed, 0x66656174);
  spec.components_given = m.components_given;
  return spec;
}

FitConfig fit_config(const ModelArgs& m, std::uint64_t seed) {
  FitConfig cfg;
  cfg.K = m.k;
  cfg.r = parse_radius(m.r);
  cfg.restarts = m.restarts;
  cfg.seed = seed;
  cfg.tol = m.tol;
  cfg.max_iter = m.max_iter;
  cfg.subsolver_tol = m.subsolver_tol;
  cfg.subsolver_max_iter = m.subsolver_max_iter;
  return cfg;
}

struct Prepared {
  Dataset dataset;
  BinGrid grid;
  std::vector<BinnedCytogram> binned;
};

Prepared prepare(const ModelArgs& m, std::ostream& err, bool verbose) {
  Prepared p;
  p.dataset = ingest_dataset(m.cytograms, m.covariates);
  if (!m.lo.empty() || !m.hi.empty()) {
    if (m.lo.empty() || m.hi.empty())
      throw UsageError("--lo and --hi must be given together");
    const auto lo = parse_list(m.lo, "--lo");
    const auto hi = parse_list(m.hi, "--hi");
    p.grid.lo = Eigen::Map<const Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    p.grid.hi = Eigen::Map<const Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()));
    p.grid.bins = m.bins;
    p.grid.validate();
    if (p.grid.dim() != p.dataset.dim())
      throw UsageError(fmt::format("grid has {} dimensions, data has {}",
                                   p.grid.dim(), p.dataset.dim()));
  } else {
    p.grid = default_grid(p.dataset.cytograms, m.bins);
  }
  std::size_t dropped = 0;
  for (const auto& c : p.dataset.cytograms) {
    std::size_t d = 0;
    p.binned.push_back(bin_cytogram(c, p.grid, &d));
    dropped += d;
  }
  if (dropped > 0)
    err << fmt::format("warning: {} particles outside the grid were dropped\n",
                       dropped);
  if (verbose) {
    std::size_t cells = 0;
    for (const auto& b : p.binned) cells += static_cast<std::size_t>(b.size());
    err << fmt::format("{} time points, {} occupied bins\n", p.binned.size(),
                       cells);
  }
  if (!m.emit_binned.empty()) write_binned_csv(m.emit_binned, p.binned);
  return p;
}

SavedModel make_saved(const FitResult& fitted, const FeaturePipeline& pipeline,
                      const FitConfig& cfg, const BinGrid& grid,
                      const Matrix& covariates) {
  SavedModel saved;
  saved.params = fitted.params;
  saved.pipeline = pipeline;
  saved.config = cfg;
  saved.grid = grid;
  saved.components = ComponentSummary::of(pipeline.components(covariates));
  saved.objective = fitted.objective();
  saved.converged = fitted.converged;
  saved.restart_index = fitted.restart_index;
  return saved;
}

std::string format_cv_table(const std::vector<CvRow>& rows) {
  std::string out = "lambda_alpha,lambda_beta,fold,nlpl\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{},{}\n", r.lambda_alpha, r.lambda_beta, r.fold,
                       r.nlpl);
  return out;
}

// Records the command line, every option value (given or default) and the
// files written, so the run can be repeated with `replay`.
class Manifest {
 public:
  Manifest(std::vector<std::string> args, const Globals& g)
      : args_(std::move(args)) {
    doc_["tool"] = "flowmoe";
    doc_["version"] = kVersion;
    doc_["args"] = args_;
    doc_["seed"] = g.seed;
    doc_["threads"] = g.threads;
  }

  void record_options(const CLI::App* sub) {
    json params = json::object();
    for (const CLI::Option* opt : sub->get_options()) {
      if (opt->get_name() == "--help") continue;
      std::string name = opt->get_name(false, true);
      name.erase(0, name.find_first_not_of('-'));
      if (opt->count() > 0) {
        const auto& res = opt->results();
        params[name] = res.size() == 1 ? json(res.front()) : json(res);
      } else {
        params[name] = opt->get_default_str();
      }
    }
    doc_["subcommand"] = sub->get_name();
    doc_["parameters"] = params;
  }

  void set(const std::string& key, json value) { doc_[key] = std::move(value); }
  void output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }

  void write(const fs::path& path) { save_json(path, doc_); }

 private:
  std::vector<std::string> args_;
  json doc_;
};

fs::path manifest_path(const Globals& g, const fs::path& primary) {
  if (!g.manifest.empty()) return g.manifest;
  if (primary.empty()) return {};
  fs::path p = primary;
  p += ".manifest.json";
  return p;
}

int map_exception(std::ostream& err) {
  try {
    throw;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const SolverError& e) {
    err << "solver error: " << e.what() << "\n";
    return kSolver;
  } catch (const json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
}

PrcTarget parse_target(const std::string& s) {
  const auto colon = s.find(':');
  const std::string kind = s.substr(0, colon);
  PrcTarget t;
  if (kind == "mean") {
    t.kind = PrcTarget::Kind::mean;
  } else if (kind == "prob" || kind == "probability") {
    t.kind = PrcTarget::Kind::probability;
  } else {
    throw UsageError(fmt::format("--target: unknown kind '{}'", kind));
  }
  bool have_k = false;
  if (colon != std::string::npos) {
    std::stringstream ss(s.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos)
        throw UsageError(fmt::format("--target: expected key=value, got '{}'", item));
      const std::string key = item.substr(0, eq);
      int value = 0;
      try {
        value = std::stoi(item.substr(eq + 1));
      } catch (const std::exception&) {
        throw UsageError(fmt::format("--target: bad value in '{}'", item));
      }
      if (key == "k") {
        if (value < 1) throw UsageError("--target: clusters are numbered from 1");
        t.cluster = value - 1;
        have_k = true;
      } else if (key == "dim") {
        t.dim = value;
      } else {
        throw UsageError(fmt::format("--target: unknown key '{}'", key));
      }
    }
  }
  if (!have_k) throw UsageError("--target needs k=<cluster>");
  return t;
}

std::pair<int, double> parse_condition(const std::string& s) {
  const auto eq = s.find('=');
  if (s.rfind("pc", 0) != 0 || eq == std::string::npos)
    throw UsageError(fmt::format("--condition: expected pcJ=value, got '{}'", s));
  try {
    const int j = std::stoi(s.substr(2, eq - 2));
    const double v = std::stod(s.substr(eq + 1));
    if (j < 1) throw UsageError("--condition: components are numbered from 1");
    return {j - 1, v};
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception&) {
    throw UsageError(fmt::format("--condition: cannot parse '{}'", s));
  }
}

Matrix load_components(const std::string& path, int T, int q,
                       std::uint64_t seed) {
  if (path.empty()) return synthetic_components(T, q, seed);
  return read_numeric_csv(path).values;
}

CovariateMatrix as_covariates(const Matrix& psi) {
  CovariateMatrix cov;
  cov.values = psi;
  for (Eigen::Index t = 0; t < psi.rows(); ++t)
    cov.times.push_back(static_cast<int>(t) + 1);
  return cov;
}

void print_fit_summary(std::ostream& out, const FitResult& fitted) {
  out << fmt::format("objective {} converged {} restart {} iterations {}\n",
                     fitted.objective(), fitted.converged ? "yes" : "no",
                     fitted.restart_index + 1,
                     fitted.objective_trace.size() - 1);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err) {
  CLI::App app{"Mixture-of-experts clustering of cytogram time series"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);

  Globals g;
  app.add_option("--seed", g.seed, "base random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_flag("--verbose", g.verbose, "progress on stderr");
  app.add_option("--manifest", g.manifest,
                 "manifest path (default: next to the main output)");

  // simulate
  auto* sim = app.add_subcommand("simulate", "generate a synthetic two-cluster dataset");
  std::string sim_config;
  std::string mean_kind;
  std::string prob_kind;
  double delta = 0.0;
  double delta_sign = 1.0;
  int n_per_time = 1000;
  double noise_sd = 0.2;
  std::string psi_path;
  int sim_T = 296;
  int sim_q = 9;
  std::string sim_out = "cytograms.csv";
  std::string truth_out = "truth.csv";
  std::string psi_out;
  sim->add_option("--config", sim_config, "both-linear, nonlinear-prob or nonlinear-mean")
      ->required();
  sim->add_option("--mean-kind", mean_kind, "linear, interaction, quadratic or logistic");
  sim->add_option("--prob-kind", prob_kind, "linear, interaction, quadratic or logistic");
  sim->add_option("--delta", delta, "signal size in [0, 0.95]")->capture_default_str();
  sim->add_option("--delta-sign", delta_sign, "+1 or -1")->capture_default_str();
  sim->add_option("--n-per-time", n_per_time)->capture_default_str();
  sim->add_option("--noise-sd", noise_sd)->capture_default_str();
  sim->add_option("--psi", psi_path, "component CSV (time,x1..xq); synthetic if absent");
  sim->add_option("--t", sim_T, "time points of the synthetic components")
      ->capture_default_str();
  sim->add_option("--q", sim_q, "columns of the synthetic components")
      ->capture_default_str();
  sim->add_option("--out", sim_out, "particle CSV")->capture_default_str();
  sim->add_option("--truth", truth_out, "truth CSV (time,mu1,mu2,pi1)")
      ->capture_default_str();
  sim->add_option("--psi-out", psi_out, "write the components as a covariate CSV");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "fit the model at fixed penalties");
  ModelArgs fit_args;
  double lambda_alpha = 0.0;
  double lambda_beta = 0.0;
  std::string model_out = "model.json";
  std::string trace_out;
  add_model_options(fit_cmd, fit_args);
  fit_cmd->add_option("--lambda-alpha", lambda_alpha)->capture_default_str();
  fit_cmd->add_option("--lambda-beta", lambda_beta)->capture_default_str();
  fit_cmd->add_option("--out", model_out, "model JSON")->capture_default_str();
  fit_cmd->add_option("--trace", trace_out, "objective trace CSV (iter,objective)");

  // cv and nested-cv
  ModelArgs cv_args;
  std::string grid_alpha;
  std::string grid_beta;
  int grid_points = 5;
  int n_folds = 5;
  int block_size = 20;
  std::string pca_scope = "per-split";
  bool warm_path = false;
  std::string cv_out = "cv_table.csv";
  std::string cv_model_out;
  auto add_cv_options = [&](CLI::App* sub) {
    add_model_options(sub, cv_args);
    sub->add_option("--grid-alpha", grid_alpha, "decreasing list");
    sub->add_option("--grid-beta", grid_beta, "decreasing list");
    sub->add_option("--grid-points", grid_points,
                    "points per penalty when no grid is given")
        ->capture_default_str();
    sub->add_option("--folds", n_folds)->capture_default_str();
    sub->add_option("--block-size", block_size)->capture_default_str();
    sub->add_option("--pca-scope", pca_scope, "per-split or global")
        ->check(CLI::IsMember({"per-split", "global"}))
        ->capture_default_str();
    sub->add_flag("--warm-path", warm_path,
                  "warm-start later grid cells within a fold");
  };
  auto* cv_cmd = app.add_subcommand("cv", "select penalties by blocked cross-validation");
  add_cv_options(cv_cmd);
  cv_cmd->add_option("--out", cv_out, "CV table CSV")->capture_default_str();
  cv_cmd->add_option("--model-out", cv_model_out, "refit at the selected penalties");

  auto* ncv_cmd = app.add_subcommand("nested-cv", "estimate out-of-sample NLPL by nested CV");
  std::string ncv_out = "nested_cv.csv";
  add_cv_options(ncv_cmd);
  ncv_cmd->add_option("--out", ncv_out, "per-fold CSV")->capture_default_str();

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "held-out NLPL of a saved model");
  std::string eval_model;
  std::string eval_cyt;
  std::string eval_cov;
  bool eval_raw = false;
  std::string eval_out;
  eval_cmd->add_option("--model", eval_model)->required();
  eval_cmd->add_option("--cytograms", eval_cyt)->required();
  eval_cmd->add_option("--covariates", eval_cov)->required();
  eval_cmd->add_flag("--raw", eval_raw, "score particles without binning");
  eval_cmd->add_option("--out", eval_out, "write the result CSV");

  // prc
  auto* prc_cmd = app.add_subcommand("prc", "partial response curves");
  std::string prc_model;
  std::string prc_target;
  int sweep_pc = 1;
  std::vector<std::string> conditions;
  int prc_points = 201;
  bool extrapolate = false;
  std::string prc_lo;
  std::string prc_hi;
  std::string prc_out = "prc.csv";
  prc_cmd->add_option("--model", prc_model)->required();
  prc_cmd->add_option("--target", prc_target, "mean:k=K,dim=D or prob:k=K")->required();
  prc_cmd->add_option("--sweep-pc", sweep_pc, "component to sweep (from 1)")
      ->capture_default_str();
  prc_cmd->add_option("--condition", conditions,
                      "pcJ=value; repeat a component for one curve per value");
  prc_cmd->add_option("--grid-points", prc_points)->capture_default_str();
  prc_cmd->add_flag("--extrapolate", extrapolate, "allow values outside the observed range");
  prc_cmd->add_option("--from", prc_lo, "sweep start (default: observed minimum)");
  prc_cmd->add_option("--to", prc_hi, "sweep end (default: observed maximum)");
  prc_cmd->add_option("--out", prc_out)->capture_default_str();

  // folds
  auto* folds_cmd = app.add_subcommand("folds", "print the blocked fold assignment");
  int folds_T = 296;
  int folds_block = 20;
  int folds_n = 5;
  folds_cmd->add_option("--t", folds_T)->capture_default_str();
  folds_cmd->add_option("--block-size", folds_block)->capture_default_str();
  folds_cmd->add_option("--n-folds", folds_n)->capture_default_str();

  // figure3
  auto* fig_cmd = app.add_subcommand("figure3", "linear vs nonlinear simulation study");
  auto fig = default_figure3_options();
  std::string fig_settings = "both-linear,nonlinear-prob:logistic,nonlinear-mean:interaction";
  int fig_deltas = 5;
  std::string fig_delta_values;
  int fig_seeds = 5;
  std::string fig_psi;
  int fig_T = 296;
  int fig_q = 9;
  bool fig_cold = false;
  std::string fig_out = "figure3.csv";
  std::string fig_runs_out;
  fig_cmd->add_option("--settings", fig_settings, "config[:kind] list")
      ->capture_default_str();
  fig_cmd->add_option("--deltas", fig_deltas, "signal sizes on [0, 0.95]")
      ->capture_default_str();
  fig_cmd->add_option("--delta-values", fig_delta_values, "explicit signal sizes");
  fig_cmd->add_option("--seeds", fig_seeds, "replicates per cell")->capture_default_str();
  fig_cmd->add_option("--n-per-time", fig.n_per_time)->capture_default_str();
  fig_cmd->add_option("--restarts", fig.fit.restarts)->capture_default_str();
  fig_cmd->add_option("--grid-points", fig.grid_points)->capture_default_str();
  fig_cmd->add_option("--grid-min-ratio", fig.grid_min_ratio)->capture_default_str();
  fig_cmd->add_option("--folds", fig.n_folds)->capture_default_str();
  fig_cmd->add_option("--block-size", fig.block_size)->capture_default_str();
  fig_cmd->add_option("--bins", fig.bins)->capture_default_str();
  fig_cmd->add_option("--nh", fig.n_h)->capture_default_str();
  fig_cmd->add_option("--a", fig.a)->capture_default_str();
  fig_cmd->add_option("--psi", fig_psi, "component CSV; synthetic if absent");
  fig_cmd->add_option("--t", fig_T)->capture_default_str();
  fig_cmd->add_option("--q", fig_q)->capture_default_str();
  fig_cmd->add_flag("--cold-path", fig_cold, "all restarts at every grid cell");
  fig_cmd->add_option("--out", fig_out, "summary CSV (config,delta,model,excess_nlpl)")
      ->capture_default_str();
  fig_cmd->add_option("--runs-out", fig_runs_out, "per-seed CSV");

  // replay
  auto* replay_cmd = app.add_subcommand("replay", "rerun the command recorded in a manifest");
  std::string replay_manifest;
  std::optional<int> replay_threads;
  replay_cmd->add_option("manifest", replay_manifest)->required();
  replay_cmd->add_option("--with-threads", replay_threads, "override the thread count");

  std::vector<const char*> argv{"flowmoe"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  set_thread_count(g.threads);
  const CLI::App* active = app.get_subcommands().front();
  Manifest manifest(args, g);
  manifest.record_options(active);

  try {
    if (active == replay_cmd) {
      const auto doc = load_json(replay_manifest);
      auto recorded = doc.at("args").get<std::vector<std::string>>();
      if (!replay_threads) return run(recorded, out, err);
      std::vector<std::string> next{"--threads", std::to_string(*replay_threads)};
      for (std::size_t i = 0; i < recorded.size(); ++i) {
        if (recorded[i] == "--threads") {
          ++i;
          continue;
        }
        if (recorded[i].rfind("--threads=", 0) == 0) continue;
        next.push_back(recorded[i]);
      }
      return run(next, out, err);
    }

    if (active == sim) {
      const auto config = sim_config_from_string(sim_config);
      auto scenario = SimScenario::make(config, FunctionKind::interaction, delta,
                                        n_per_time, g.seed);
      if (!mean_kind.empty()) scenario.mean_kind = function_kind_from_string(mean_kind);
      if (!prob_kind.empty()) scenario.prob_kind = function_kind_from_string(prob_kind);
      scenario.noise_sd = noise_sd;
      scenario.delta_sign = delta_sign;
      scenario.validate();
      const Matrix psi = load_components(psi_path, sim_T, sim_q, g.seed);
      const auto ds = generate(scenario, psi);
      write_cytograms_csv(sim_out, ds.cytograms);
      std::string truth = "time,mu1,mu2,pi1\n";
      for (Eigen::Index t = 0; t < psi.rows(); ++t)
        truth += fmt::format("{},{},{},{}\n", ds.cytograms[t].t,
                             ds.truth.mu1[t], ds.truth.mu2, ds.truth.pi1[t]);
      write_file_atomic(truth_out, truth);
      manifest.output(sim_out);
      manifest.output(truth_out);
      if (!psi_out.empty()) {
        write_covariates_csv(psi_out, as_covariates(psi));
        manifest.output(psi_out);
      }
      manifest.set("scenario", json{{"config", to_string(scenario.config)},
                                    {"mean_kind", to_string(scenario.mean_kind)},
                                    {"prob_kind", to_string(scenario.prob_kind)},
                                    {"seed", scenario.seed}});
      if (g.verbose)
        err << fmt::format("mu2 {}\n", ds.truth.mu2);
      manifest.write(manifest_path(g, sim_out));
      return kOk;
    }

    if (active == fit_cmd) {
      const auto prepared = prepare(fit_args, err, g.verbose);
      const auto spec = feature_spec(fit_args, g.seed);
      const auto pipeline = fit_pipeline(prepared.dataset.covariates.values, spec);
      const Matrix feats = pipeline.transform(prepared.dataset.covariates.values);
      auto cfg = fit_config(fit_args, g.seed);
      cfg.lambda_alpha = lambda_alpha;
      cfg.lambda_beta = lambda_beta;
      const auto fitted = fit(prepared.binned, feats, cfg);
      save_model(model_out, make_saved(fitted, pipeline, cfg, prepared.grid,
                                       prepared.dataset.covariates.values));
      manifest.output(model_out);
      if (!trace_out.empty()) {
        std::string trace = "iter,objective\n";
        for (std::size_t i = 0; i < fitted.objective_trace.size(); ++i)
          trace += fmt::format("{},{}\n", i, fitted.objective_trace[i]);
        write_file_atomic(trace_out, trace);
        manifest.output(trace_out);
      }
      if (!fit_args.emit_binned.empty()) manifest.output(fit_args.emit_binned);
      manifest.set("feature_seed", spec.seed);
      manifest.set("q", pipeline.pca.q);
      print_fit_summary(out, fitted);
      if (fitted.subsolver_warnings > 0)
        err << fmt::format("warning: {} subsolver runs hit their iteration cap\n",
                           fitted.subsolver_warnings);
      manifest.write(manifest_path(g, model_out));
      return kOk;
    }

    if (active == cv_cmd || active == ncv_cmd) {
      const auto prepared = prepare(cv_args, err, g.verbose);
      const auto spec = feature_spec(cv_args, g.seed);
      const Matrix& X = prepared.dataset.covariates.values;
      const FeatureSource source = pca_scope == "global"
                                       ? global_features(X, spec)
                                       : per_split_features(X, spec);
      const auto cfg = fit_config(cv_args, g.seed);
      std::optional<CvGrid> grid;
      if (!grid_alpha.empty() || !grid_beta.empty()) {
        if (grid_alpha.empty() || grid_beta.empty())
          throw UsageError("--grid-alpha and --grid-beta must be given together");
        grid = CvGrid{parse_list(grid_alpha, "--grid-alpha"),
                      parse_list(grid_beta, "--grid-beta")};
        grid->validate();
      }
      manifest.set("feature_seed", spec.seed);

      if (active == ncv_cmd) {
        NestedCvOptions opts;
        opts.block_size = block_size;
        opts.n_folds = n_folds;
        opts.grid = grid;
        opts.grid_points = grid_points;
        opts.warm_path = warm_path;
        const auto res = nested_cv(prepared.binned, source, cfg, opts);
        std::string csv = "outer_fold,lambda_alpha,lambda_beta,nlpl\n";
        for (std::size_t j = 0; j < res.outer_nlpl.size(); ++j)
          csv += fmt::format("{},{},{},{}\n", j + 1, res.selected_lambda_alpha[j],
                             res.selected_lambda_beta[j], res.outer_nlpl[j]);
        write_file_atomic(ncv_out, csv);
        manifest.output(ncv_out);
        out << fmt::format("mean_nlpl {}\n", res.mean_nlpl);
        manifest.write(manifest_path(g, ncv_out));
        return kOk;
      }

      const auto folds =
          make_folds(static_cast<int>(prepared.binned.size()), block_size, n_folds);
      if (!grid) {
        const auto full = global_features(X, spec)({}, 0).feats;
        const auto lm = lambda_max(prepared.binned, full, cfg);
        grid = CvGrid::log_spaced(lm.alpha, lm.beta, grid_points);
        if (g.verbose)
          err << fmt::format("lambda_max alpha {} beta {}\n", lm.alpha, lm.beta);
      }
      const auto res = cross_validate(prepared.binned, source, cfg, *grid, folds,
                                      CvOptions{g.seed, warm_path});
      write_file_atomic(cv_out, format_cv_table(res.table));
      manifest.output(cv_out);
      manifest.set("grid", json{{"lambda_alpha", grid->lambda_alpha},
                                {"lambda_beta", grid->lambda_beta}});
      manifest.set("selected", json{{"lambda_alpha", res.best_lambda_alpha},
                                    {"lambda_beta", res.best_lambda_beta}});
      out << fmt::format("best lambda_alpha {} lambda_beta {}\n",
                         res.best_lambda_alpha, res.best_lambda_beta);
      if (!cv_model_out.empty()) {
        const auto pipeline = fit_pipeline(X, spec);
        const Matrix feats = pipeline.transform(X);
        auto final_cfg = cfg;
        final_cfg.lambda_alpha = res.best_lambda_alpha;
        final_cfg.lambda_beta = res.best_lambda_beta;
        const auto fitted = fit(prepared.binned, feats, final_cfg);
        save_model(cv_model_out,
                   make_saved(fitted, pipeline, final_cfg, prepared.grid, X));
        manifest.output(cv_model_out);
        print_fit_summary(out, fitted);
      }
      if (!cv_args.emit_binned.empty()) manifest.output(cv_args.emit_binned);
      manifest.write(manifest_path(g, cv_out));
      return kOk;
    }

    if (active == eval_cmd) {
      const auto saved = load_model(eval_model);
      const auto ds = ingest_dataset(eval_cyt, eval_cov);
      const Matrix feats = saved.pipeline.transform(ds.covariates.values);
      std::vector<BinnedCytogram> data;
      std::size_t dropped = 0;
      if (eval_raw || !saved.grid) {
        data = as_binned(ds.cytograms);
      } else {
        for (const auto& c : ds.cytograms) {
          std::size_t d = 0;
          data.push_back(bin_cytogram(c, *saved.grid, &d));
          dropped += d;
        }
      }
      if (dropped > 0)
        err << fmt::format("warning: {} particles outside the grid were dropped\n",
                           dropped);
      const double nlpl = heldout_nlpl(saved.params, data, feats);
      out << fmt::format("nlpl {}\n", nlpl);
      if (!eval_out.empty()) {
        write_file_atomic(eval_out, fmt::format("nlpl\n{}\n", nlpl));
        manifest.output(eval_out);
      }
      const auto mpath = manifest_path(g, eval_out);
      if (!mpath.empty()) manifest.write(mpath);
      return kOk;
    }

    if (active == prc_cmd) {
      const auto saved = load_model(prc_model);
      PrcRequest req;
      req.target = parse_target(prc_target);
      req.sweep_pc = sweep_pc - 1;
      req.baseline = saved.components.mean;
      req.ranges = saved.components;
      req.extrapolate = extrapolate;
      const int q = saved.pipeline.pca.q;
      if (req.sweep_pc < 0 || req.sweep_pc >= q)
        throw UsageError(fmt::format("--sweep-pc must be in 1..{}", q));
      if (prc_points < 2) throw UsageError("--grid-points must be at least 2");
      const double lo = prc_lo.empty() ? saved.components.min[req.sweep_pc]
                                       : parse_list(prc_lo, "--from").at(0);
      const double hi = prc_hi.empty() ? saved.components.max[req.sweep_pc]
                                       : parse_list(prc_hi, "--to").at(0);
      for (int i = 0; i < prc_points; ++i)
        req.grid.push_back(lo + (hi - lo) * i / (prc_points - 1));

      // Components given once are fixed; a component given several times
      // produces one curve per value.
      std::map<int, std::vector<double>> by_pc;
      for (const auto& c : conditions) {
        const auto [j, v] = parse_condition(c);
        if (j >= q) throw UsageError(fmt::format("--condition: pc{} out of range", j + 1));
        by_pc[j].push_back(v);
      }
      std::optional<int> varying;
      std::string fixed_label;
      for (const auto& [j, values] : by_pc) {
        if (values.size() > 1) {
          if (varying) throw UsageError("--condition: only one component may take several values");
          varying = j;
        } else {
          req.conditioning.emplace_back(j, values.front());
          fixed_label += fmt::format("{}pc{}={}", fixed_label.empty() ? "" : ";",
                                     j + 1, values.front());
        }
      }
      std::string csv = conditions.empty() ? "x,value\n" : "x,value,condition\n";
      if (varying) {
        const auto& values = by_pc[*varying];
        const auto curves =
            conditional_partial_response(saved.params, saved.pipeline.rfm, req,
                                         values, *varying);
        for (std::size_t c = 0; c < curves.size(); ++c) {
          std::string label = fmt::format("pc{}={}", *varying + 1, values[c]);
          if (!fixed_label.empty()) label += ";" + fixed_label;
          for (const auto& p : curves[c])
            csv += fmt::format("{},{},{}\n", p.x, p.value, label);
        }
      } else {
        for (const auto& p : partial_response(saved.params, saved.pipeline.rfm, req)) {
          if (conditions.empty())
            csv += fmt::format("{},{}\n", p.x, p.value);
          else
            csv += fmt::format("{},{},{}\n", p.x, p.value, fixed_label);
        }
      }
      write_file_atomic(prc_out, csv);
      manifest.output(prc_out);
      manifest.write(manifest_path(g, prc_out));
      return kOk;
    }

    if (active == folds_cmd) {
      const auto folds = make_folds(folds_T, folds_block, folds_n);
      std::string text = "time,fold\n";
      for (int t = 0; t < folds_T; ++t)
        text += fmt::format("{},{}\n", t + 1, folds.assignment[t]);
      out << text;
      if (!g.manifest.empty()) manifest.write(g.manifest);
      return kOk;
    }

    if (active == fig_cmd) {
      fig.settings.clear();
      std::stringstream ss(fig_settings);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        Figure3Options::Setting s;
        s.config = sim_config_from_string(item.substr(0, colon));
        s.kind = colon == std::string::npos
                     ? (s.config == SimConfig::both_linear ? FunctionKind::linear
                                                           : FunctionKind::interaction)
                     : function_kind_from_string(item.substr(colon + 1));
        fig.settings.push_back(s);
      }
      fig.deltas = fig_delta_values.empty() ? signal_grid(fig_deltas)
                                            : parse_list(fig_delta_values, "--delta-values");
      fig.seeds.clear();
      for (int i = 0; i < fig_seeds; ++i)
        fig.seeds.push_back(derive_seed(g.seed, static_cast<std::uint64_t>(i)));
      fig.warm_path = !fig_cold;
      fig.feature_seed = derive_seed(g.seed, 0x66656174);
      const Matrix psi = load_components(fig_psi, fig_T, fig_q, g.seed);
      const auto start = std::chrono::steady_clock::now();
      Figure3Progress progress;
      if (g.verbose)
        progress = [&](const Figure3Row& r) {
          const double secs = std::chrono::duration<double>(
                                  std::chrono::steady_clock::now() - start)
                                  .count();
          err << fmt::format("[{:.0f}s] {} delta={} seed={} {} excess={}\n", secs,
                             r.config, r.delta, r.seed, r.model, r.excess_nlpl);
        };
      const auto rows = replicate_figure3(fig, psi, progress);
      std::string csv = "config,delta,model,excess_nlpl\n";
      for (const auto& s : summarize(rows))
        csv += fmt::format("{},{},{},{}\n", s.config, s.delta, s.model,
                           s.median_excess);
      write_file_atomic(fig_out, csv);
      manifest.output(fig_out);
      if (!fig_runs_out.empty()) {
        std::string runs =
            "config,delta,seed,model,test_nlpl,oracle_nlpl,excess_nlpl,"
            "lambda_alpha,lambda_beta\n";
        for (const auto& r : rows)
          runs += fmt::format("{},{},{},{},{},{},{},{},{}\n", r.config, r.delta,
                              r.seed, r.model, r.test_nlpl, r.oracle_nlpl,
                              r.excess_nlpl, r.lambda_alpha, r.lambda_beta);
        write_file_atomic(fig_runs_out, runs);
        manifest.output(fig_runs_out);
      }
      out << csv;
      manifest.write(manifest_path(g, fig_out));
      return kOk;
    }
  } catch (...) {
    return map_exception(err);
  }
  return kUsage;
}

}  // namespace flowmoe::cli
