#include "schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ddpm {

namespace {

void check_step(const Schedule& s, int t, const char* op) {
  if (t < 1 || t > s.steps) {
    throw std::invalid_argument(std::string(op) + ": step " + std::to_string(t) +
                                " outside [1, " + std::to_string(s.steps) + "]");
  }
}

void check_shapes(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a.shape) + " and " +
                                shape_str(b.shape) + " differ");
  }
}

}  // namespace

Schedule build_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) {
    throw std::invalid_argument("build_schedule: steps must be >= 1, got " +
                                std::to_string(steps));
  }
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1, got " +
                                std::to_string(beta_start) + " .. " + std::to_string(beta_end));
  }
  Schedule s;
  s.steps = steps;
  s.beta.resize((size_t)steps + 1, 0.0);
  s.alpha.resize((size_t)steps + 1, 1.0);
  s.alpha_bar.resize((size_t)steps + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    double frac = steps == 1 ? 0.0 : (double)(t - 1) / (double)(steps - 1);
    s.beta[(size_t)t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[(size_t)t] = 1.0 - s.beta[(size_t)t];
    s.alpha_bar[(size_t)t] = s.alpha_bar[(size_t)t - 1] * s.alpha[(size_t)t];
  }
  return s;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& noise, const Schedule& s) {
  check_step(s, t, "forward_noise");
  check_shapes(x0, noise, "forward_noise");
  double ab = s.alpha_bar[(size_t)t];
  double cs = std::sqrt(ab);
  double cn = std::sqrt(1.0 - ab);
  Tensor out(x0.shape);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = cs * x0.data[i] + cn * noise.data[i];
  }
  return out;
}

Tensor predict_x0(const Tensor& x_t, int t, const Tensor& eps_hat, const Schedule& s) {
  check_step(s, t, "predict_x0");
  check_shapes(x_t, eps_hat, "predict_x0");
  double ab = s.alpha_bar[(size_t)t];
  if (ab <= 0.0) {
    throw std::invalid_argument("predict_x0: alpha_bar[" + std::to_string(t) +
                                "] is zero, x0 is unrecoverable");
  }
  double inv = 1.0 / std::sqrt(ab);
  double cn = std::sqrt(1.0 - ab);
  Tensor out(x_t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) {
    double v = (x_t.data[i] - cn * eps_hat.data[i]) * inv;
    out.data[i] = std::clamp(v, -1.0, 1.0);
  }
  return out;
}

Tensor reverse_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Schedule& s,
                    const Tensor& injected_noise) {
  check_step(s, t, "reverse_step");
  check_shapes(x_t, eps_hat, "reverse_step");
  check_shapes(x_t, injected_noise, "reverse_step");
  double beta = s.beta[(size_t)t];
  double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[(size_t)t]);
  double eps_coef = beta / std::sqrt(1.0 - s.alpha_bar[(size_t)t]);
  double sigma = t == 1 ? 0.0 : std::sqrt(beta);
  Tensor out(x_t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) {
    double mean = inv_sqrt_alpha * (x_t.data[i] - eps_coef * eps_hat.data[i]);
    out.data[i] = mean + sigma * injected_noise.data[i];
  }
  return out;
}

}  // namespace ddpm
