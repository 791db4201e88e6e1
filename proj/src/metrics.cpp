#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "rng.hpp"

namespace ddpm {

namespace {

void check_square(const Tensor& s, const char* op) {
  if (s.rank() != 2 || s.shape[0] != s.shape[1]) {
    throw std::invalid_argument(std::string(op) + ": expected a square matrix, got " +
                                shape_str(s.shape));
  }
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data) m = std::max(m, std::abs(v));
  return m;
}

// Cyclic Jacobi rotations; plenty accurate and fast at feature-space sizes.
void jacobi_eigen(const Tensor& s, std::vector<double>& eigvals, Tensor& eigvecs) {
  int n = s.shape[0];
  Tensor a = s;
  eigvecs = Tensor(std::vector<int>{n, n});
  for (int i = 0; i < n; ++i) eigvecs.data[(size_t)(i * n + i)] = 1.0;

  auto off_norm = [&]() {
    double sum = 0.0;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double v = a.data[(size_t)(p * n + q)];
        sum += v * v;
      }
    }
    return std::sqrt(sum);
  };

  double scale = std::max(1e-300, max_abs(a));
  for (int sweep = 0; sweep < 100 && off_norm() > 1e-14 * scale * n; ++sweep) {
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = a.data[(size_t)(p * n + q)];
        if (std::abs(apq) <= 1e-300) continue;
        double app = a.data[(size_t)(p * n + p)];
        double aqq = a.data[(size_t)(q * n + q)];
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double sn = t * c;
        for (int k = 0; k < n; ++k) {
          double akp = a.data[(size_t)(k * n + p)];
          double akq = a.data[(size_t)(k * n + q)];
          a.data[(size_t)(k * n + p)] = c * akp - sn * akq;
          a.data[(size_t)(k * n + q)] = sn * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          double apk = a.data[(size_t)(p * n + k)];
          double aqk = a.data[(size_t)(q * n + k)];
          a.data[(size_t)(p * n + k)] = c * apk - sn * aqk;
          a.data[(size_t)(q * n + k)] = sn * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          double vkp = eigvecs.data[(size_t)(k * n + p)];
          double vkq = eigvecs.data[(size_t)(k * n + q)];
          eigvecs.data[(size_t)(k * n + p)] = c * vkp - sn * vkq;
          eigvecs.data[(size_t)(k * n + q)] = sn * vkp + c * vkq;
        }
      }
    }
  }
  eigvals.resize((size_t)n);
  for (int i = 0; i < n; ++i) eigvals[(size_t)i] = a.data[(size_t)(i * n + i)];
}

Tensor mat_mul_plain(const Tensor& a, const Tensor& b) {
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out(std::vector<int>{m, n});
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      double av = a.data[(size_t)(i * k + kk)];
      for (int j = 0; j < n; ++j) {
        out.data[(size_t)(i * n + j)] += av * b.data[(size_t)(kk * n + j)];
      }
    }
  }
  return out;
}

Tensor symmetrized(const Tensor& s) {
  int n = s.shape[0];
  Tensor out(std::vector<int>{n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      out.data[(size_t)(i * n + j)] =
          0.5 * (s.data[(size_t)(i * n + j)] + s.data[(size_t)(j * n + i)]);
    }
  }
  return out;
}

}  // namespace

FeatureProjector make_projector(int input_dim, int feature_dim, uint64_t seed) {
  if (input_dim < 1 || feature_dim < 1) {
    throw std::invalid_argument("make_projector: dimensions must be positive");
  }
  FeatureProjector p;
  p.input_dim = input_dim;
  p.feature_dim = feature_dim;
  p.seed = seed;
  p.matrix = Tensor(std::vector<int>{input_dim, feature_dim});
  Rng rng(seed);
  double inv = 1.0 / std::sqrt((double)input_dim);
  for (double& v : p.matrix.data) v = rng.normal() * inv;
  return p;
}

Tensor extract_features(const Tensor& images, const FeatureProjector& proj) {
  if (images.rank() != 4) {
    throw std::invalid_argument("extract_features: expected (N,C,H,W) images, got " +
                                shape_str(images.shape));
  }
  int n = images.shape[0];
  int64_t per_image = images.numel() / n;
  if (per_image != proj.input_dim) {
    throw std::invalid_argument("extract_features: image size " + std::to_string(per_image) +
                                " does not match projector input " +
                                std::to_string(proj.input_dim));
  }
  Tensor flat = images;
  flat.shape = {n, (int)per_image};
  return mat_mul_plain(flat, proj.matrix);
}

GaussianStats gaussian_stats(const Tensor& features) {
  if (features.rank() != 2) {
    throw std::invalid_argument("gaussian_stats: expected (N,d) features, got " +
                                shape_str(features.shape));
  }
  int n = features.shape[0], d = features.shape[1];
  if (n < 2) {
    throw std::invalid_argument("gaussian_stats: need at least 2 samples, got " +
                                std::to_string(n));
  }
  GaussianStats st;
  st.count = n;
  st.mu = Tensor(std::vector<int>{d});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) st.mu.data[(size_t)j] += features.data[(size_t)(i * d + j)];
  }
  for (int j = 0; j < d; ++j) st.mu.data[(size_t)j] /= (double)n;

  Tensor sigma(std::vector<int>{d, d});
  std::vector<double> centered((size_t)d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      centered[(size_t)j] = features.data[(size_t)(i * d + j)] - st.mu.data[(size_t)j];
    }
    for (int r = 0; r < d; ++r) {
      double cr = centered[(size_t)r];
      for (int c = 0; c < d; ++c) {
        sigma.data[(size_t)(r * d + c)] += cr * centered[(size_t)c];
      }
    }
  }
  for (double& v : sigma.data) v /= (double)(n - 1);
  st.sigma = symmetrized(sigma);
  return st;
}

Tensor matrix_sqrt_psd(const Tensor& s) {
  check_square(s, "matrix_sqrt_psd");
  int n = s.shape[0];
  double tol = 1e-9 * std::max(1.0, max_abs(s));
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (std::abs(s.data[(size_t)(i * n + j)] - s.data[(size_t)(j * n + i)]) > tol) {
        throw std::invalid_argument("matrix_sqrt_psd: input is asymmetric beyond tolerance");
      }
    }
  }
  std::vector<double> eigvals;
  Tensor vecs;
  jacobi_eigen(symmetrized(s), eigvals, vecs);
  Tensor out(std::vector<int>{n, n});
  for (int k = 0; k < n; ++k) {
    double lam = std::max(0.0, eigvals[(size_t)k]);
    double root = std::sqrt(lam);
    for (int i = 0; i < n; ++i) {
      double vik = vecs.data[(size_t)(i * n + k)] * root;
      for (int j = 0; j < n; ++j) {
        out.data[(size_t)(i * n + j)] += vik * vecs.data[(size_t)(j * n + k)];
      }
    }
  }
  return symmetrized(out);
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (!a.mu.same_shape(b.mu) || !a.sigma.same_shape(b.sigma)) {
    throw std::invalid_argument("frechet_distance: stats dimensions differ, " +
                                shape_str(a.sigma.shape) + " vs " + shape_str(b.sigma.shape));
  }
  int d = a.mu.shape[0];
  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) {
    double diff = a.mu.data[(size_t)i] - b.mu.data[(size_t)i];
    mean_term += diff * diff;
  }
  Tensor root_a = matrix_sqrt_psd(a.sigma);
  Tensor inner = symmetrized(mat_mul_plain(mat_mul_plain(root_a, b.sigma), root_a));
  Tensor cross = matrix_sqrt_psd(inner);
  double trace = 0.0;
  for (int i = 0; i < d; ++i) {
    trace += a.sigma.data[(size_t)(i * d + i)] + b.sigma.data[(size_t)(i * d + i)] -
             2.0 * cross.data[(size_t)(i * d + i)];
  }
  return std::max(0.0, mean_term + trace);
}

}  // namespace ddpm
