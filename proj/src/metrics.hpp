#pragma once

#include <cstdint>

#include "tensor.hpp"

namespace ddpm {

// Fixed random linear map standing in for a pretrained feature extractor.
// Both image sets of one comparison must go through the same projector.
struct FeatureProjector {
  int input_dim = 0;
  int feature_dim = 0;
  uint64_t seed = 0;
  Tensor matrix;  // (input_dim, feature_dim), N(0,1) entries / sqrt(input_dim)
};

FeatureProjector make_projector(int input_dim, int feature_dim, uint64_t seed);

// images: (N, C, H, W); each image is flattened row-major and multiplied by
// the projector matrix. Returns (N, feature_dim).
Tensor extract_features(const Tensor& images, const FeatureProjector& proj);

// Mean vector and unbiased sample covariance of a feature matrix.
struct GaussianStats {
  Tensor mu;     // (d)
  Tensor sigma;  // (d, d), symmetrized
  int count = 0;
};

GaussianStats gaussian_stats(const Tensor& features);

// Symmetric PSD square root via Jacobi eigendecomposition; negative
// eigenvalues from roundoff are clamped to zero.
Tensor matrix_sqrt_psd(const Tensor& s);

// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}), the
// symmetric-product form; tiny negative totals from roundoff clamp to 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

}  // namespace ddpm
