#include "denoiser.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "rng.hpp"

namespace ddpm {

void DenoiserConfig::validate() const {
  if (image_size < 2 || channels < 1 || base_width < 4 || depth < 1 || embed_dim < 2) {
    throw std::invalid_argument("denoiser config: sizes out of range");
  }
  if (embed_dim % 2 != 0) {
    throw std::invalid_argument("denoiser config: embed_dim must be even");
  }
  if (num_classes < 2) {
    throw std::invalid_argument(
        "denoiser config: num_classes must be >= 2 (one real class plus the null row)");
  }
  int div = 1 << depth;
  if (image_size % div != 0) {
    throw std::invalid_argument("denoiser config: image_size " + std::to_string(image_size) +
                                " not divisible by 2^depth = " + std::to_string(div));
  }
}

void ParamSet::add(std::string name, Tensor value) {
  if (has(name)) throw std::logic_error("param set: duplicate name " + name);
  items_.emplace_back(std::move(name), std::move(value));
}

bool ParamSet::has(const std::string& name) const {
  for (const auto& [n, v] : items_) {
    if (n == name) return true;
  }
  return false;
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& [n, v] : items_) {
    if (n == name) return v;
  }
  throw std::out_of_range("param set: no parameter named " + name);
}

Tensor& ParamSet::get(const std::string& name) {
  for (auto& [n, v] : items_) {
    if (n == name) return v;
  }
  throw std::out_of_range("param set: no parameter named " + name);
}

bool ParamSet::aligned_with(const ParamSet& other) const {
  if (items_.size() != other.items_.size()) return false;
  for (size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].first != other.items_[i].first) return false;
    if (items_[i].second.shape != other.items_[i].second.shape) return false;
  }
  return true;
}

int norm_group_count(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

namespace {

Tensor uniform_init(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double bound = 1.0 / std::sqrt((double)fan_in);
  for (double& v : t.data) v = (2.0 * rng.uniform() - 1.0) * bound;
  return t;
}

}  // namespace

DenoiserParams init_params(const DenoiserConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet p;
  int e = cfg.embed_dim;

  p.add("cond.table", uniform_init({cfg.num_classes, e}, e, rng));
  p.add("cond.mlp.w", uniform_init({e, e}, e, rng));
  p.add("cond.mlp.b", Tensor(std::vector<int>{e}));

  int w0 = cfg.stage_width(0);
  p.add("stem.w", uniform_init({w0, cfg.channels, 3, 3}, cfg.channels * 9, rng));
  p.add("stem.b", Tensor(std::vector<int>{w0}));

  for (int i = 1; i <= cfg.depth; ++i) {
    std::string pre = "down" + std::to_string(i);
    int cin = cfg.stage_width(i - 1);
    int cout = cfg.stage_width(i);
    p.add(pre + ".norm_a.g", Tensor(std::vector<int>{cin}, 1.0));
    p.add(pre + ".norm_a.b", Tensor(std::vector<int>{cin}));
    p.add(pre + ".down.w", uniform_init({cout, cin, 3, 3}, cin * 9, rng));
    p.add(pre + ".down.b", Tensor(std::vector<int>{cout}));
    p.add(pre + ".cond.w", uniform_init({e, cout}, e, rng));
    p.add(pre + ".norm_b.g", Tensor(std::vector<int>{cout}, 1.0));
    p.add(pre + ".norm_b.b", Tensor(std::vector<int>{cout}));
    p.add(pre + ".conv.w", uniform_init({cout, cout, 3, 3}, cout * 9, rng));
    p.add(pre + ".conv.b", Tensor(std::vector<int>{cout}));
  }

  int wd = cfg.stage_width(cfg.depth);
  p.add("mid.norm1.g", Tensor(std::vector<int>{wd}, 1.0));
  p.add("mid.norm1.b", Tensor(std::vector<int>{wd}));
  p.add("mid.conv1.w", uniform_init({wd, wd, 3, 3}, wd * 9, rng));
  p.add("mid.conv1.b", Tensor(std::vector<int>{wd}));
  p.add("mid.cond.w", uniform_init({e, wd}, e, rng));
  p.add("mid.attn_norm.g", Tensor(std::vector<int>{wd}, 1.0));
  p.add("mid.attn_norm.b", Tensor(std::vector<int>{wd}));
  p.add("mid.attn.wq", uniform_init({wd, wd}, wd, rng));
  p.add("mid.attn.wk", uniform_init({wd, wd}, wd, rng));
  p.add("mid.attn.wv", uniform_init({wd, wd}, wd, rng));
  p.add("mid.attn.wo", uniform_init({wd, wd}, wd, rng));
  p.add("mid.norm2.g", Tensor(std::vector<int>{wd}, 1.0));
  p.add("mid.norm2.b", Tensor(std::vector<int>{wd}));
  p.add("mid.conv2.w", uniform_init({wd, wd, 3, 3}, wd * 9, rng));
  p.add("mid.conv2.b", Tensor(std::vector<int>{wd}));

  for (int i = cfg.depth; i >= 1; --i) {
    std::string pre = "up" + std::to_string(i);
    int cin = cfg.stage_width(i) + cfg.stage_width(i - 1);
    int cout = cfg.stage_width(i - 1);
    int k = i == 1 ? 1 : 3;  // full-resolution merge stays pointwise
    p.add(pre + ".norm.g", Tensor(std::vector<int>{cin}, 1.0));
    p.add(pre + ".norm.b", Tensor(std::vector<int>{cin}));
    p.add(pre + ".conv.w", uniform_init({cout, cin, k, k}, cin * k * k, rng));
    p.add(pre + ".conv.b", Tensor(std::vector<int>{cout}));
    p.add(pre + ".cond.w", uniform_init({e, cout}, e, rng));
  }

  p.add("head.norm.g", Tensor(std::vector<int>{w0}, 1.0));
  p.add("head.norm.b", Tensor(std::vector<int>{w0}));
  p.add("head.conv.w", Tensor(std::vector<int>{cfg.channels, w0, 3, 3}));
  p.add("head.conv.b", Tensor(std::vector<int>{cfg.channels}));
  return p;
}

Tensor time_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) {
    throw std::invalid_argument("time_embedding: dim must be a positive even number, got " +
                                std::to_string(dim));
  }
  if (t < 0) throw std::invalid_argument("time_embedding: t must be >= 0");
  Tensor out(std::vector<int>{dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, (2.0 * i) / dim);
    out.data[(size_t)i] = std::sin(t / freq);
    out.data[(size_t)(half + i)] = std::cos(t / freq);
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument("attention: expected 2-D Q, K, V");
  }
  if (q.shape[1] != k.shape[1]) {
    throw std::invalid_argument("attention: Q " + shape_str(q.shape) + " and K " +
                                shape_str(k.shape) + " disagree on key width");
  }
  if (k.shape[0] != v.shape[0]) {
    throw std::invalid_argument("attention: K " + shape_str(k.shape) + " and V " +
                                shape_str(v.shape) + " disagree on row count");
  }
  Tensor logits = scale(matmul(q, k, false, true), 1.0 / std::sqrt((double)q.shape[1]));
  return matmul(softmax(logits, 1), v);
}

namespace {

struct ForwardCtx {
  const DenoiserConfig& cfg;
  const ParamSet& p;
  int batch;

  Tensor gn(const Tensor& h, const std::string& name) const {
    int c = h.shape[1];
    Tensor n = group_normalize(h, norm_group_count(c), 1e-5);
    Tensor g = reshape(p.get(name + ".g"), {1, c, 1, 1});
    Tensor b = reshape(p.get(name + ".b"), {1, c, 1, 1});
    return add(mul(n, g), b);
  }

  Tensor conv(const Tensor& h, const std::string& name, int stride, int pad) const {
    Tensor y = conv2d(h, p.get(name + ".w"), stride, pad);
    return add(y, reshape(p.get(name + ".b"), {1, y.shape[1], 1, 1}));
  }

  Tensor inject(const Tensor& h, const Tensor& e, const std::string& name) const {
    Tensor proj = matmul(e, p.get(name + ".cond.w"));  // (B, c)
    return add(h, reshape(proj, {batch, h.shape[1], 1, 1}));
  }

  Tensor upsample2x(const Tensor& x) const {
    int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    Tensor t = reshape(x, {b, c, h, w, 1});
    t = concat({t, t}, 4);
    t = reshape(t, {b, c, h, 1, 2 * w});
    t = concat({t, t}, 3);
    return reshape(t, {b, c, 2 * h, 2 * w});
  }

  Tensor attention_block(const Tensor& h) const {
    int c = h.shape[1], hh = h.shape[2], ww = h.shape[3];
    Tensor tokens = reshape(gn(h, "mid.attn_norm"), {batch, c, hh * ww});
    Tensor q = matmul(tokens, p.get("mid.attn.wq"), true, false);  // (B, n, c)
    Tensor k = matmul(tokens, p.get("mid.attn.wk"), true, false);
    Tensor v = matmul(tokens, p.get("mid.attn.wv"), true, false);
    Tensor logits = scale(matmul(q, k, false, true), 1.0 / std::sqrt((double)c));
    Tensor weights = softmax(logits, 2);
    Tensor mixed = matmul(weights, v);                              // (B, n, c)
    Tensor back = matmul(p.get("mid.attn.wo"), mixed, true, true);  // (B, c, n)
    return reshape(back, {batch, c, hh, ww});
  }
};

}  // namespace

Tensor denoiser_forward(const DenoiserConfig& cfg, const DenoiserParams& p, const Tensor& x,
                        const std::vector<int>& t, const std::vector<int>& cond) {
  cfg.validate();
  if (x.rank() != 4 || x.shape[1] != cfg.channels || x.shape[2] != cfg.image_size ||
      x.shape[3] != cfg.image_size) {
    throw std::invalid_argument("denoiser_forward: input " + shape_str(x.shape) +
                                " does not match config (" + std::to_string(cfg.channels) + "," +
                                std::to_string(cfg.image_size) + ")");
  }
  int b = x.shape[0];
  if ((int)t.size() != b || (int)cond.size() != b) {
    throw std::invalid_argument("denoiser_forward: need one t and one cond per sample");
  }
  for (int c : cond) {
    if (c < 0 || c >= cfg.num_classes) {
      throw std::invalid_argument("denoiser_forward: class index " + std::to_string(c) +
                                  " outside [0, " + std::to_string(cfg.num_classes) + ")");
    }
  }

  ForwardCtx ctx{cfg, p, b};

  // conditioning vector: sinusoidal timestep + class row, through one MLP layer
  Tensor sins(std::vector<int>{b, cfg.embed_dim});
  for (int i = 0; i < b; ++i) {
    Tensor row = time_embedding(t[(size_t)i], cfg.embed_dim);
    std::copy(row.data.begin(), row.data.end(),
              sins.data.begin() + (size_t)i * cfg.embed_dim);
  }
  Tensor e = add(sins, embed_lookup(p.get("cond.table"), cond));
  e = silu(add(matmul(e, p.get("cond.mlp.w")), p.get("cond.mlp.b")));

  Tensor h = ctx.conv(x, "stem", 1, 1);
  std::vector<Tensor> skips;
  for (int i = 1; i <= cfg.depth; ++i) {
    std::string pre = "down" + std::to_string(i);
    skips.push_back(h);
    Tensor a = silu(ctx.gn(h, pre + ".norm_a"));
    a = ctx.conv(a, pre + ".down", 2, 1);
    a = ctx.inject(a, e, pre);
    a = silu(ctx.gn(a, pre + ".norm_b"));
    h = ctx.conv(a, pre + ".conv", 1, 1);
  }

  Tensor m = silu(ctx.gn(h, "mid.norm1"));
  m = ctx.conv(m, "mid.conv1", 1, 1);
  m = ctx.inject(m, e, "mid");
  m = add(m, ctx.attention_block(m));
  m = silu(ctx.gn(m, "mid.norm2"));
  h = ctx.conv(m, "mid.conv2", 1, 1);

  for (int i = cfg.depth; i >= 1; --i) {
    std::string pre = "up" + std::to_string(i);
    h = ctx.upsample2x(h);
    h = concat({h, skips[(size_t)i - 1]}, 1);
    Tensor a = silu(ctx.gn(h, pre + ".norm"));
    a = ctx.conv(a, pre + ".conv", 1, i == 1 ? 0 : 1);
    h = ctx.inject(a, e, pre);
  }

  Tensor out = silu(ctx.gn(h, "head.norm"));
  return ctx.conv(out, "head.conv", 1, 1);
}

}  // namespace ddpm
