#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "flowmoe/types.hpp"

namespace flowmoe {

// Element-wise logistic function, 1 / (1 + exp(-x)), written so that neither
// branch overflows.
template <typename Derived>
auto logistic(const Eigen::ArrayBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) {
    if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
}

// Column centering and unit-variance scaling (sample standard deviation).
struct Standardizer {
  Vector means;
  Vector scales;

  static Standardizer fit(const Matrix& x);
  Matrix apply(const Matrix& x) const;
  Vector apply(const Vector& x) const;
};

struct PcaProjection {
  Matrix loadings;   // p x q, orthonormal columns
  Vector explained;  // variance fraction of each kept component
  int q = 0;
};

enum class Activation { logistic, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

// Frozen hidden layer. Row 0 of `weights` multiplies the constant 1, rows
// 1..q multiply the principal components.
struct RandomFeatureMap {
  Matrix weights;  // (q + 1) x n_h
  double a = 0.5;
  int n_h = 0;
  Activation activation = Activation::logistic;
  std::uint64_t seed = 0;
  bool linear_variant = false;

  int input_dim() const { return static_cast<int>(weights.rows()) - 1; }
};

// Standardizes, then keeps the smallest number of leading components whose
// cumulative explained variance reaches `threshold`. Each loading column is
// signed so that its largest-magnitude entry is positive.
struct PcaFit {
  Standardizer standardizer;
  PcaProjection pca;
};
PcaFit fit_pca(const Matrix& x, double threshold);

// Same decomposition with a fixed component count.
PcaFit fit_pca_fixed(const Matrix& x, int q);

Vector project(const Standardizer& s, const PcaProjection& pca,
               const Vector& x);
Matrix project(const Standardizer& s, const PcaProjection& pca,
               const Matrix& x);

// Draws every weight i.i.d. Unif(-a, a) from a counter-based stream keyed by
// `seed`, in row-major order.
RandomFeatureMap make_random_features(std::uint64_t seed, int q, int n_h,
                                      double a, Activation activation);

// Identity block with identity activation: the features are exactly the q
// principal components, giving the linear mixture-of-experts baseline.
RandomFeatureMap make_linear_variant(int q);

Vector hidden_features(const RandomFeatureMap& rfm, const Vector& psi);
Matrix hidden_features(const RandomFeatureMap& rfm, const Matrix& psi);

// Settings that determine a pipeline, apart from the covariates it is fit to.
struct FeatureSpec {
  double pca_threshold = 0.95;
  std::optional<int> fixed_q;  // overrides the threshold when set
  int n_h = 70;
  double a = 0.5;
  Activation activation = Activation::logistic;
  bool linear_variant = false;
  std::uint64_t seed = 0;
  // Treat the input columns as principal components already: no centering,
  // scaling or rotation before the hidden layer.
  bool components_given = false;
};

struct FeaturePipeline {
  Standardizer standardizer;
  PcaProjection pca;
  RandomFeatureMap rfm;

  int feature_dim() const { return rfm.n_h; }
  Matrix components(const Matrix& x) const;  // T x q principal components
  Matrix transform(const Matrix& x) const;   // T x n_h features
  Vector transform(const Vector& x) const;
};

FeaturePipeline fit_pipeline(const Matrix& x, const FeatureSpec& spec);

}  // namespace flowmoe
