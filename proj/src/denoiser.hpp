#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace ddpm {

// Shape of the conditional noise-prediction net. num_classes INCLUDES the
// reserved null row (index num_classes - 1) used as the unconditional input.
struct DenoiserConfig {
  int image_size = 16;
  int channels = 3;
  int base_width = 32;
  int depth = 2;
  int embed_dim = 64;
  int num_classes = 9;

  int null_class() const { return num_classes - 1; }
  // channel count after i downsampling stages (i = 0 is the stem width)
  int stage_width(int i) const { return base_width + (base_width / 4) * i; }
  void validate() const;
};

// Ordered, named tensor collection. The order is fixed by construction and
// shared by the EMA shadow, optimizer state and checkpoints.
class ParamSet {
 public:
  void add(std::string name, Tensor value);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  bool aligned_with(const ParamSet& other) const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

using DenoiserParams = ParamSet;

// Deterministic init: conv/linear weights uniform in +-1/sqrt(fan_in),
// norm scales 1 / shifts 0, and an all-zero output conv so the untrained
// net predicts zero noise.
DenoiserParams init_params(const DenoiserConfig& config, uint64_t seed);

// Sinusoidal embedding: entry i < dim/2 is sin(t / 10000^(2i/dim)), entry
// dim/2 + i the matching cos. dim must be even.
Tensor time_embedding(int t, int dim);

// softmax(Q K^T / sqrt(d_k)) V for 2-D matrices.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

// eps_theta(x_t, t, c). x: (B, channels, S, S); t and cond have one entry
// per sample; cond entries must lie in [0, num_classes). Differentiable when
// a tape is active (leaf the params first).
Tensor denoiser_forward(const DenoiserConfig& config, const DenoiserParams& params,
                        const Tensor& x, const std::vector<int>& t,
                        const std::vector<int>& cond);

// Largest of {8,4,2,1} dividing the channel count.
int norm_group_count(int channels);

}  // namespace ddpm
