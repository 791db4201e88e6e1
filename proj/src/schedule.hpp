#pragma once

#include <vector>

#include "tensor.hpp"

namespace ddpm {

// Per-step noising variances and their cumulative products. Arrays are
// 1-based in t with alpha_bar[0] = 1, so t = 0 means "clean image".
// Immutable once built; every operation below is a pure function.
struct Schedule {
  int steps = 0;
  std::vector<double> beta;       // [0..T], beta[0] unused
  std::vector<double> alpha;      // alpha[t] = 1 - beta[t]
  std::vector<double> alpha_bar;  // alpha_bar[t] = alpha_bar[t-1] * alpha[t]
};

// Linear beta ramp from beta_start (t=1) to beta_end (t=T).
Schedule build_schedule(int steps, double beta_start, double beta_end);

// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise
Tensor forward_noise(const Tensor& x0, int t, const Tensor& noise, const Schedule& s);

// (x_t - sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha_bar[t]), clamped to
// [-1, 1] elementwise.
Tensor predict_x0(const Tensor& x_t, int t, const Tensor& eps_hat, const Schedule& s);

// One ancestral step: mean (x_t - beta[t]/sqrt(1-alpha_bar[t]) * eps_hat) /
// sqrt(alpha[t]), plus sqrt(beta[t]) * injected_noise except at t = 1 where
// the noise term is dropped.
Tensor reverse_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Schedule& s,
                    const Tensor& injected_noise);

}  // namespace ddpm
