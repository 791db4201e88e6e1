#pragma once

#include <cstdint>
#include <random>

namespace ddpm {

// Derives independent stream seeds from a base seed (splitmix64 over the
// pair). Used everywhere a component needs its own stream: dataset samples,
// per-class sampling, parameter init vs. the training stream.
uint64_t mix_seed(uint64_t base, uint64_t salt);

// Deterministic RNG with a fixed, documented draw sequence. mt19937_64 is
// fully specified by the standard; the distributions below are implemented
// here because the <random> distribution objects are not portable.
// normal() always consumes exactly two uniform draws (Box-Muller, no
// caching), so the stream position is a pure function of the call history.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  // N(0, 1)
  double normal();

  // [0, n); modulo draw, bias immaterial at the n used here
  uint64_t below(uint64_t n) { return next_u64() % n; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace ddpm
