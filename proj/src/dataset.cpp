#include "dataset.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "rng.hpp"

namespace ddpm {

namespace {

struct Template {
  const char* name;
  double r, g, b;
};

// Shapes in clearly separated hues; class mean images stay far apart.
constexpr Template kTemplates[] = {
    {"circle", 0.90, 0.15, 0.15},   {"square", 0.15, 0.85, 0.20},
    {"triangle", 0.20, 0.30, 0.95}, {"cross", 0.95, 0.90, 0.15},
    {"ring", 0.90, 0.20, 0.90},     {"diamond", 0.15, 0.85, 0.90},
    {"hstripes", 0.95, 0.55, 0.10}, {"vstripes", 0.55, 0.20, 0.80},
};

bool inside_shape(int which, double dx, double dy, double radius) {
  double ax = std::abs(dx), ay = std::abs(dy);
  double d2 = dx * dx + dy * dy;
  switch (which) {
    case 0:  // circle
      return d2 <= radius * radius;
    case 1:  // square
      return std::max(ax, ay) <= radius * 0.85;
    case 2: {  // triangle, apex up
      double s = (dy + radius) / (2.0 * radius);
      return s >= 0.0 && s <= 1.0 && ax <= s * radius * 0.95;
    }
    case 3:  // cross
      return (ax <= 0.35 * radius && ay <= radius) || (ay <= 0.35 * radius && ax <= radius);
    case 4:  // ring
      return d2 <= radius * radius && d2 >= 0.3 * radius * radius;
    case 5:  // diamond
      return ax + ay <= radius * 1.15;
    case 6:  // horizontal stripes
      return ax <= radius && ay <= radius &&
             ((int)std::floor((dy / radius + 1.0) * 1.5) % 2 == 0);
    case 7:  // vertical stripes
      return ax <= radius && ay <= radius &&
             ((int)std::floor((dx / radius + 1.0) * 1.5) % 2 == 0);
    default:
      return false;
  }
}

}  // namespace

int dataset_template_count() { return (int)(sizeof(kTemplates) / sizeof(kTemplates[0])); }

std::vector<LabeledImage> generate_dataset(int num_classes, int per_class, int size,
                                           uint64_t seed) {
  if (num_classes < 1 || per_class < 1 || size < 8) {
    throw std::invalid_argument("generate_dataset: need num_classes >= 1, per_class >= 1, size >= 8");
  }
  if (num_classes > dataset_template_count()) {
    throw std::invalid_argument("generate_dataset: " + std::to_string(num_classes) +
                                " classes requested but only " +
                                std::to_string(dataset_template_count()) +
                                " shape templates exist");
  }
  std::vector<LabeledImage> out;
  out.reserve((size_t)num_classes * per_class);
  for (int c = 0; c < num_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Rng rng(mix_seed(mix_seed(seed, (uint64_t)c), (uint64_t)i));
      double cx = 0.5 + (rng.uniform() - 0.5) * 0.24;
      double cy = 0.5 + (rng.uniform() - 0.5) * 0.24;
      double radius = 0.26 + rng.uniform() * 0.12;
      double bg = 0.06 + rng.uniform() * 0.18;
      double bg_tint[3] = {bg + rng.uniform() * 0.05, bg + rng.uniform() * 0.05,
                           bg + rng.uniform() * 0.05};
      double brightness = 0.85 + rng.uniform() * 0.15;
      const Template& tpl = kTemplates[c];
      double fg[3] = {tpl.r * brightness, tpl.g * brightness, tpl.b * brightness};

      LabeledImage img;
      img.label = c;
      img.pixels = Tensor(std::vector<int>{3, size, size});
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          double u = (x + 0.5) / size;
          double v = (y + 0.5) / size;
          bool hit = inside_shape(c, u - cx, v - cy, radius);
          for (int ch = 0; ch < 3; ++ch) {
            double val = hit ? fg[ch] : bg_tint[ch];
            img.pixels.data[(size_t)((ch * size + y) * size + x)] = std::clamp(val, 0.0, 1.0);
          }
        }
      }
      out.push_back(std::move(img));
    }
  }
  // regroup class-major: generated per (c, i) already in that order
  return out;
}

Tensor preprocess(const LabeledImage& image, int target_size) {
  if (target_size < 1) {
    throw std::invalid_argument("preprocess: target_size must be >= 1");
  }
  if (image.pixels.rank() != 3 || image.pixels.numel() == 0) {
    throw std::invalid_argument("preprocess: expected nonempty (C,H,W) pixels, got " +
                                shape_str(image.pixels.shape));
  }
  int c = image.pixels.shape[0], h = image.pixels.shape[1], w = image.pixels.shape[2];
  Tensor out(std::vector<int>{c, target_size, target_size});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < target_size; ++y) {
      int sy = (int)((int64_t)y * h / target_size);
      for (int x = 0; x < target_size; ++x) {
        int sx = (int)((int64_t)x * w / target_size);
        double v = image.pixels.data[(size_t)((ch * h + sy) * w + sx)];
        out.data[(size_t)((ch * target_size + y) * target_size + x)] = (v - 0.5) / 0.5;
      }
    }
  }
  return out;
}

Tensor denormalize(const Tensor& t) {
  Tensor out(t.shape);
  for (size_t i = 0; i < t.data.size(); ++i) {
    out.data[i] = std::clamp(t.data[i] * 0.5 + 0.5, 0.0, 1.0);
  }
  return out;
}

}  // namespace ddpm
