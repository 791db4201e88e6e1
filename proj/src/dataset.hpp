#pragma once

#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace ddpm {

// (C,H,W) pixels in [0,1] plus a class label.
struct LabeledImage {
  Tensor pixels;
  int label = 0;
};

int dataset_template_count();

// Procedurally rendered shape-on-tinted-background images, one (shape, hue)
// template per class, with per-sample jitter in position, scale, brightness
// and background. Deterministic in seed; sample streams derive from
// (seed, class, index) so generation order is irrelevant. Returns images
// grouped by class, exactly per_class each.
std::vector<LabeledImage> generate_dataset(int num_classes, int per_class, int size,
                                           uint64_t seed);

// Nearest-neighbour resize to target_size, then map [0,1] -> [-1,1] per
// channel ((x - 0.5) / 0.5).
Tensor preprocess(const LabeledImage& image, int target_size);

// Inverse of the normalization: x -> clamp(x * 0.5 + 0.5, 0, 1).
Tensor denormalize(const Tensor& t);

}  // namespace ddpm
