#include "flowmoe/features.hpp"

#include <fmt/format.h>

#include <algorithm>

#include "flowmoe/rng.hpp"

namespace flowmoe {

std::string to_string(Activation a) {
  return a == Activation::logistic ? "logistic" : "identity";
}

Activation activation_from_string(const std::string& name) {
  if (name == "logistic") return Activation::logistic;
  if (name == "identity") return Activation::identity;
  throw UsageError(fmt::format("unknown activation '{}'", name));
}

Standardizer Standardizer::fit(const Matrix& x) {
  if (x.rows() < 2)
    throw UsageError("standardization needs at least two rows");
  Standardizer s;
  s.means = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - s.means.transpose();
  s.scales = (centered.colwise().squaredNorm().transpose() /
              static_cast<double>(x.rows() - 1))
                 .cwiseSqrt();
  for (Eigen::Index j = 0; j < s.scales.size(); ++j) {
    const double tol = 1e-12 * std::max(1.0, std::abs(s.means[j]));
    if (!(s.scales[j] > tol))
      throw DataError(fmt::format("covariate column {} is constant", j + 1));
  }
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  if (x.cols() != means.size())
    throw UsageError(fmt::format("expected {} covariates, got {}",
                                 means.size(), x.cols()));
  return (x.rowwise() - means.transpose()).array().rowwise() /
         scales.transpose().array();
}

Vector Standardizer::apply(const Vector& x) const {
  if (x.size() != means.size())
    throw UsageError(fmt::format("expected {} covariates, got {}",
                                 means.size(), x.size()));
  return (x - means).cwiseQuotient(scales);
}

namespace {

struct Spectrum {
  Standardizer standardizer;
  Matrix v;         // p x r
  Vector fraction;  // r
};

Spectrum decompose(const Matrix& x) {
  Spectrum out;
  out.standardizer = Standardizer::fit(x);
  const Matrix z = out.standardizer.apply(x);
  Eigen::BDCSVD<Matrix> svd(z, Eigen::ComputeThinV);
  const Vector sq = svd.singularValues().array().square();
  out.fraction = sq / sq.sum();
  out.v = svd.matrixV();
  for (Eigen::Index j = 0; j < out.v.cols(); ++j) {
    Eigen::Index arg = 0;
    out.v.col(j).cwiseAbs().maxCoeff(&arg);
    if (out.v(arg, j) < 0.0) out.v.col(j) *= -1.0;
  }
  return out;
}

PcaFit keep(Spectrum&& s, int q) {
  PcaFit fit;
  fit.standardizer = std::move(s.standardizer);
  fit.pca.q = q;
  fit.pca.loadings = s.v.leftCols(q);
  fit.pca.explained = s.fraction.head(q);
  return fit;
}

}  // namespace

PcaFit fit_pca(const Matrix& x, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw UsageError(
        fmt::format("variance threshold {} outside (0, 1]", threshold));
  auto s = decompose(x);
  // Cumulative sums carry rounding error, so a threshold of exactly 1 is met
  // once the remainder is at round-off level.
  double cumulative = 0.0;
  int q = static_cast<int>(s.fraction.size());
  for (Eigen::Index j = 0; j < s.fraction.size(); ++j) {
    cumulative += s.fraction[j];
    if (cumulative >= threshold - 1e-12) {
      q = static_cast<int>(j) + 1;
      break;
    }
  }
  return keep(std::move(s), q);
}

PcaFit fit_pca_fixed(const Matrix& x, int q) {
  auto s = decompose(x);
  if (q < 1 || q > s.v.cols())
    throw UsageError(fmt::format("component count {} outside [1, {}]", q,
                                 s.v.cols()));
  return keep(std::move(s), q);
}

Vector project(const Standardizer& s, const PcaProjection& pca,
               const Vector& x) {
  return pca.loadings.transpose() * s.apply(x);
}

Matrix project(const Standardizer& s, const PcaProjection& pca,
               const Matrix& x) {
  return s.apply(x) * pca.loadings;
}

RandomFeatureMap make_random_features(std::uint64_t seed, int q, int n_h,
                                      double a, Activation activation) {
  if (n_h < 1) throw UsageError("hidden width must be at least 1");
  if (q < 0) throw UsageError("input dimension must be non-negative");
  if (!(a >= 0.0)) throw UsageError("weight half-width must be non-negative");
  RandomFeatureMap rfm;
  rfm.a = a;
  rfm.n_h = n_h;
  rfm.activation = activation;
  rfm.seed = seed;
  rfm.weights.resize(q + 1, n_h);
  CounterRng rng(seed, /*stream=*/0x57);
  for (int i = 0; i <= q; ++i)
    for (int j = 0; j < n_h; ++j) rfm.weights(i, j) = rng.uniform(-a, a);
  return rfm;
}

RandomFeatureMap make_linear_variant(int q) {
  if (q < 1) throw UsageError("linear variant needs at least one component");
  RandomFeatureMap rfm;
  rfm.a = 0.0;
  rfm.n_h = q;
  rfm.activation = Activation::identity;
  rfm.linear_variant = true;
  rfm.weights = Matrix::Zero(q + 1, q);
  rfm.weights.bottomRows(q).setIdentity();
  return rfm;
}

Vector hidden_features(const RandomFeatureMap& rfm, const Vector& psi) {
  if (psi.size() != rfm.input_dim())
    throw UsageError(fmt::format("expected {} components, got {}",
                                 rfm.input_dim(), psi.size()));
  if (rfm.linear_variant) return psi;
  Vector h = rfm.weights.row(0).transpose() +
             rfm.weights.bottomRows(psi.size()).transpose() * psi;
  if (rfm.activation == Activation::logistic) return flowmoe::logistic(h.array()).matrix();
  return h;
}

Matrix hidden_features(const RandomFeatureMap& rfm, const Matrix& psi) {
  if (psi.cols() != rfm.input_dim())
    throw UsageError(fmt::format("expected {} components, got {}",
                                 rfm.input_dim(), psi.cols()));
  if (rfm.linear_variant) return psi;
  Matrix h = psi * rfm.weights.bottomRows(psi.cols());
  h.rowwise() += rfm.weights.row(0);
  if (rfm.activation == Activation::logistic) return flowmoe::logistic(h.array()).matrix();
  return h;
}

Matrix FeaturePipeline::components(const Matrix& x) const {
  return project(standardizer, pca, x);
}

Matrix FeaturePipeline::transform(const Matrix& x) const {
  return hidden_features(rfm, components(x));
}

Vector FeaturePipeline::transform(const Vector& x) const {
  return hidden_features(rfm, project(standardizer, pca, x));
}

FeaturePipeline fit_pipeline(const Matrix& x, const FeatureSpec& spec) {
  FeaturePipeline p;
  if (spec.components_given) {
    const auto q = x.cols();
    if (q < 1) throw DataError("no components");
    p.standardizer.means = Vector::Zero(q);
    p.standardizer.scales = Vector::Ones(q);
    p.pca.loadings = Matrix::Identity(q, q);
    p.pca.explained = Vector::Constant(q, 1.0 / static_cast<double>(q));
    p.pca.q = static_cast<int>(q);
  } else {
    auto fitted = spec.fixed_q ? fit_pca_fixed(x, *spec.fixed_q)
                               : fit_pca(x, spec.pca_threshold);
    p.standardizer = std::move(fitted.standardizer);
    p.pca = std::move(fitted.pca);
  }
  p.rfm = spec.linear_variant
              ? make_linear_variant(p.pca.q)
              : make_random_features(spec.seed, p.pca.q, spec.n_h, spec.a,
                                     spec.activation);
  return p;
}

}  // namespace flowmoe
