#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "oracles.hpp"
#include "schedule.hpp"

using namespace ddpm;
using namespace ddpm::testing;

TEST_CASE("build_schedule examples and invariants") {
  Schedule one = build_schedule(1, 0.5, 0.5);
  CHECK(one.beta[1] == 0.5);
  CHECK(one.alpha_bar[0] == 1.0);
  CHECK(one.alpha_bar[1] == 0.5);

  Schedule two = build_schedule(2, 0.1, 0.3);
  CHECK(two.alpha_bar[0] == 1.0);
  CHECK(two.alpha_bar[1] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(two.alpha_bar[2] == doctest::Approx(0.63).epsilon(1e-12));

  for (const Schedule& s : {build_schedule(200, 1e-4, 0.02), two, build_schedule(37, 0.01, 0.5)}) {
    for (int t = 1; t <= s.steps; ++t) {
      CHECK(s.beta[(size_t)t] > 0.0);
      CHECK(s.beta[(size_t)t] < 1.0);
      CHECK(s.alpha_bar[(size_t)t] < s.alpha_bar[(size_t)t - 1]);
      // cumulative product holds exactly, not approximately
      CHECK(s.alpha_bar[(size_t)t] == s.alpha_bar[(size_t)t - 1] * s.alpha[(size_t)t]);
    }
    CHECK(s.alpha_bar[(size_t)s.steps] > 0.0);
    CHECK(s.alpha_bar[(size_t)s.steps] < 1.0);
  }
}

TEST_CASE("build_schedule rejects bad ranges") {
  CHECK_THROWS_AS(build_schedule(0, 0.1, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(10, 0.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(10, 0.3, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(10, 0.1, 1.0), std::invalid_argument);
}

namespace {

// Hand-assembled tables for boundary cases a built schedule cannot reach.
Schedule fixed_schedule(double beta, double alpha, double ab) {
  Schedule s;
  s.steps = 1;
  s.beta = {0.0, beta};
  s.alpha = {1.0, alpha};
  s.alpha_bar = {1.0, ab};
  return s;
}

}  // namespace

TEST_CASE("forward_noise closed form") {
  Tensor x0 = Tensor::from({3}, {0.2, -0.5, 0.9});
  Tensor noise = Tensor::from({3}, {1.0, -1.0, 0.25});

  Tensor same = forward_noise(x0, 1, noise, fixed_schedule(0.0, 1.0, 1.0));
  CHECK(max_abs_diff(same, x0) == 0.0);

  Tensor all_noise = forward_noise(x0, 1, noise, fixed_schedule(1.0, 0.0, 0.0));
  CHECK(max_abs_diff(all_noise, noise) == 0.0);

  Tensor mid = forward_noise(Tensor::scalar(1.0), 1, Tensor::scalar(1.0),
                             fixed_schedule(0.75, 0.25, 0.25));
  CHECK(mid.value() == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-12));

  CHECK_THROWS_AS(forward_noise(x0, 2, noise, fixed_schedule(0.5, 0.5, 0.5)),
                  std::invalid_argument);
  CHECK_THROWS_AS(forward_noise(x0, 1, Tensor::scalar(0.0), fixed_schedule(0.5, 0.5, 0.5)),
                  std::invalid_argument);
}

TEST_CASE("predict_x0 inverts forward_noise") {
  Schedule s = build_schedule(50, 1e-3, 0.05);
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x0 = rand_tensor({2, 3}, rng, -0.99, 0.99);
    Tensor eps = rand_tensor({2, 3}, rng, -2.0, 2.0);
    int t = 1 + (int)rng.below(50);
    Tensor xt = forward_noise(x0, t, eps, s);
    Tensor rec = predict_x0(xt, t, eps, s);
    CHECK(max_abs_diff(rec, x0) < 1e-12);
  }

  Tensor spec_case = predict_x0(Tensor::scalar(1.36603), 1, Tensor::scalar(1.0),
                                fixed_schedule(0.75, 0.25, 0.25));
  CHECK(spec_case.value() == doctest::Approx(1.0).epsilon(1e-5));  // clamp engages

  Tensor idly = predict_x0(Tensor::scalar(0.375), 1, Tensor::scalar(0.0),
                           fixed_schedule(0.0, 1.0, 1.0));
  CHECK(idly.value() == 0.375);

  CHECK_THROWS_AS(predict_x0(Tensor::scalar(1.0), 1, Tensor::scalar(0.0),
                             fixed_schedule(1.0, 0.0, 0.0)),
                  std::invalid_argument);
}

TEST_CASE("reverse_step mean and variance behaviour") {
  Tensor zero = Tensor::scalar(0.0);

  // derived scalar case: beta = 0.75, x_t = 0.5 + sqrt(0.75), eps = 1
  Schedule s1 = build_schedule(1, 0.75, 0.75);
  Tensor exact = reverse_step(Tensor::scalar(0.5 + std::sqrt(0.75)), 1, Tensor::scalar(1.0), s1,
                              zero);
  CHECK(exact.value() == doctest::Approx(1.0).epsilon(1e-12));
  // the quoted 5-decimal variant of the same case
  Tensor quoted = reverse_step(Tensor::scalar(1.36603), 1, Tensor::scalar(1.0), s1, zero);
  CHECK(quoted.value() == doctest::Approx(1.0000091924311228).epsilon(1e-12));
  CHECK(quoted.value() == doctest::Approx(1.0).epsilon(2e-5));

  // beta -> 0 limit: the step is a no-op
  Schedule tiny = fixed_schedule(1e-12, 1.0 - 1e-12, 0.5);
  Tensor noop = reverse_step(Tensor::scalar(0.8), 1, Tensor::scalar(0.3), tiny, zero);
  CHECK(std::abs(noop.value() - 0.8) < 1e-11);

  // injected noise is ignored at t=1, scaled by sqrt(beta) elsewhere
  Schedule s2 = build_schedule(2, 0.04, 0.04);
  Tensor inj = Tensor::scalar(2.0);
  Tensor x = Tensor::scalar(0.5);
  Tensor eps = Tensor::scalar(0.1);
  Tensor at1a = reverse_step(x, 1, eps, s2, zero);
  Tensor at1b = reverse_step(x, 1, eps, s2, inj);
  CHECK(at1a.value() == at1b.value());
  Tensor at2a = reverse_step(x, 2, eps, s2, zero);
  Tensor at2b = reverse_step(x, 2, eps, s2, inj);
  CHECK(at2b.value() - at2a.value() == doctest::Approx(2.0 * std::sqrt(0.04)).epsilon(1e-12));

  CHECK_THROWS_AS(reverse_step(x, 3, eps, s2, zero), std::invalid_argument);
}

TEST_CASE("one reverse step with the true noise stays consistent with x0") {
  Schedule s = build_schedule(200, 1e-4, 0.02);
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    double x0 = -0.9 + 1.8 * rng.uniform();
    double eps = rng.normal();
    int t = 2 + (int)rng.below(199);
    Tensor xt = forward_noise(Tensor::scalar(x0), t, Tensor::scalar(eps), s);
    Tensor xprev = reverse_step(xt, t, Tensor::scalar(eps), s, Tensor::scalar(0.0));
    // effective noise carried into step t-1 by the posterior mean
    double ab_t = s.alpha_bar[(size_t)t];
    double ab_prev = s.alpha_bar[(size_t)t - 1];
    double eps_eff = eps * std::sqrt(s.alpha[(size_t)t]) * std::sqrt(1.0 - ab_prev) /
                     std::sqrt(1.0 - ab_t);
    Tensor rec = predict_x0(xprev, t - 1, Tensor::scalar(eps_eff), s);
    CHECK(std::abs(rec.value() - x0) < 1e-8);
  }
}
