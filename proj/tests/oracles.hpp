#pragma once

// Test-only reference implementations, kept independent of the library's
// compute paths on purpose: plain loops, no tape, no shared kernels.

#include <cmath>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace ddpm::testing {

inline Tensor rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Quadruple-loop convolution, the reference for conv2d.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  int Co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out(std::vector<int>{B, Co, Ho, Wo});
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (int ci = 0; ci < Ci; ++ci) {
            for (int r = 0; r < kh; ++r) {
              for (int q = 0; q < kw; ++q) {
                int ih = oh * stride - pad + r;
                int iw = ow * stride - pad + q;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.data[(size_t)(((b * Ci + ci) * H + ih) * W + iw)] *
                       w.data[(size_t)(((co * Ci + ci) * kh + r) * kw + q)];
              }
            }
          }
          out.data[(size_t)(((b * Co + co) * Ho + oh) * Wo + ow)] = acc;
        }
      }
    }
  }
  return out;
}

// Plain 2-D matrix product.
inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out(std::vector<int>{m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) acc += a.data[(size_t)(i * k + kk)] * b.data[(size_t)(kk * n + j)];
      out.data[(size_t)(i * n + j)] = acc;
    }
  }
  return out;
}

// Differentiable reduction of an op output to a scalar: sum of t * weights.
// A fixed random weighting keeps sign cancellations from hiding gradient bugs.
inline Tensor weighted_sum(const Tensor& t, const Tensor& weights) {
  Tensor prod = mul(t, weights);
  int64_t n = prod.numel();
  Tensor row = reshape(prod, {1, (int)n});
  Tensor col(std::vector<int>{(int)n, 1}, 1.0);
  return matmul(row, col);
}

inline Tensor sum_all(const Tensor& t) {
  int64_t n = t.numel();
  Tensor row = reshape(t, {1, (int)n});
  Tensor col(std::vector<int>{(int)n, 1}, 1.0);
  return matmul(row, col);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  }
  return worst;
}

}  // namespace ddpm::testing
