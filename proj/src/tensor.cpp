#include "tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "parallel.hpp"

namespace ddpm {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

thread_local Tape* g_active_tape = nullptr;

// Large enough that elementwise work is worth fanning out.
constexpr int64_t kParallelCutoff = 1 << 14;

}  // namespace

int64_t shape_numel(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
  for (int d : shape) {
    if (d <= 0) fail("tensor: nonpositive dimension in shape " + shape_str(shape));
  }
  data.assign((size_t)shape_numel(shape), fill);
}

Tensor Tensor::scalar(double v) {
  Tensor t(std::vector<int>{1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> d) {
  if (shape_numel(s) != (int64_t)d.size()) {
    fail("tensor: shape " + shape_str(s) + " does not hold " + std::to_string(d.size()) +
         " values");
  }
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(d);
  return t;
}

int64_t Tensor::numel() const { return (int64_t)data.size(); }

double Tensor::value() const {
  if (data.size() != 1) fail("tensor: value() on non-scalar shape " + shape_str(shape));
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

OpKind op_kind_from_name(const std::string& name) {
  static const std::map<std::string, OpKind> table = {
      {"add", OpKind::add},           {"mul", OpKind::mul},
      {"matmul", OpKind::matmul},     {"conv2d", OpKind::conv2d},
      {"silu", OpKind::silu},         {"softmax", OpKind::softmax},
      {"normalize", OpKind::normalize}, {"reshape", OpKind::reshape},
      {"concat", OpKind::concat},     {"slice", OpKind::slice},
      {"embed_lookup", OpKind::embed_lookup}, {"scale", OpKind::scale},
  };
  auto it = table.find(name);
  if (it == table.end()) fail("apply_op: unknown op kind '" + name + "'");
  return it->second;
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::silu: return "silu";
    case OpKind::softmax: return "softmax";
    case OpKind::normalize: return "normalize";
    case OpKind::reshape: return "reshape";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::embed_lookup: return "embed_lookup";
    case OpKind::scale: return "scale";
  }
  return "?";
}

/* ------------------------------------------------------------------ */
/* broadcasting helpers                                                */

namespace {

std::vector<int> broadcast_shape(const char* op, const std::vector<int>& a,
                                 const std::vector<int>& b) {
  size_t r = std::max(a.size(), b.size());
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      fail(std::string("op ") + op + ": shapes " + shape_str(a) + " and " + shape_str(b) +
           " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `s` aligned to a broadcast result of rank `rank`,
// with stride 0 on stretched dims.
std::vector<int64_t> broadcast_strides(const std::vector<int>& s, size_t rank) {
  std::vector<int64_t> strides(rank, 0);
  int64_t acc = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    size_t di = s.size() - 1 - i;
    strides[rank - 1 - i] = (s[di] == 1) ? 0 : acc;
    acc *= s[di];
  }
  return strides;
}

// Walks a broadcast output space, handing (out_index, a_offset, b_offset)
// to fn in row-major order.
template <typename F>
void broadcast_walk(const std::vector<int>& out_shape, const std::vector<int>& a_shape,
                    const std::vector<int>& b_shape, F&& fn) {
  size_t rank = out_shape.size();
  auto sa = broadcast_strides(a_shape, rank);
  auto sb = broadcast_strides(b_shape, rank);
  int64_t total = shape_numel(out_shape);
  std::vector<int> coord(rank, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < total; ++i) {
    fn(i, oa, ob);
    for (size_t d = rank; d-- > 0;) {
      ++coord[d];
      oa += sa[d];
      ob += sb[d];
      if (coord[d] < out_shape[d]) break;
      oa -= (int64_t)coord[d] * sa[d];
      ob -= (int64_t)coord[d] * sb[d];
      coord[d] = 0;
    }
  }
}

// dst (target_shape) += reduce-sum of factor*g over broadcast dims.
void reduce_into(Tensor& dst, const Tensor& g, const Tensor* factor,
                 const std::vector<int>& factor_shape) {
  if (!factor && dst.shape == g.shape) {
    for (size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
    return;
  }
  broadcast_walk(g.shape, dst.shape, factor ? factor_shape : dst.shape,
                 [&](int64_t i, int64_t od, int64_t of) {
                   dst.data[(size_t)od] += factor ? g.data[(size_t)i] * factor->data[(size_t)of]
                                                  : g.data[(size_t)i];
                 });
}

}  // namespace

/* ------------------------------------------------------------------ */
/* tape                                                                */

Tape* Tape::active() { return g_active_tape; }

uint64_t Tape::next_generation() {
  static std::atomic<uint64_t> counter{0};
  return ++counter;
}

TapeScope::TapeScope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return (int)nodes_.size() - 1;
}

Tensor Tape::leaf(const Tensor& value) {
  Node n;
  n.is_leaf = true;
  n.out_shape = value.shape;
  Tensor out = value;
  out.node = push(std::move(n));
  out.tape_gen = gen_;
  return out;
}

// Called by every op after computing `result`; records a node when a tape is
// active. Inputs recorded under a different tape count as constants.
Tensor record_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs,
                 Tensor&& result, std::vector<Tensor>&& saved) {
  Tape* t = g_active_tape;
  if (!t) {
    result.node = -1;
    result.tape_gen = 0;
    return std::move(result);
  }
  Tape::Node n;
  n.kind = kind;
  n.attrs = attrs;
  n.out_shape = result.shape;
  n.inputs.reserve(inputs.size());
  n.in_shapes.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    bool tracked = in.node >= 0 && in.tape_gen == t->gen_;
    n.inputs.push_back(tracked ? in.node : -1);
    n.in_shapes.push_back(in.shape);
  }
  n.saved = std::move(saved);
  for (Tensor& s : n.saved) {
    s.node = -1;
    s.tape_gen = 0;
  }
  result.node = t->push(std::move(n));
  result.tape_gen = t->gen_;
  return std::move(result);
}

void Tape::accumulate(int node, const Tensor& g) {
  if (node < 0) return;
  Tensor& slot = grads_[(size_t)node];
  if (slot.data.empty()) {
    slot = g;
    slot.node = -1;
    return;
  }
  for (size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
}

bool Tape::has_gradient(int node) const {
  return node >= 0 && node < (int)grads_.size() && !grads_[(size_t)node].data.empty();
}

const Tensor& Tape::gradient(int node) const {
  if (!has_gradient(node)) {
    fail("tape: no gradient recorded for node " + std::to_string(node));
  }
  return grads_[(size_t)node];
}

std::map<int, Tensor> Tape::gradient_map() const {
  std::map<int, Tensor> m;
  for (int i = 0; i < (int)grads_.size(); ++i) {
    if (!grads_[(size_t)i].data.empty()) m[i] = grads_[(size_t)i];
  }
  return m;
}

void Tape::backward(const Tensor& root) {
  if (backward_done_) throw std::logic_error("tape: backward already ran; tapes are single-use");
  if (root.numel() != 1) {
    fail("backward: root must be scalar, got shape " + shape_str(root.shape));
  }
  if (root.node < 0 || root.node >= (int)nodes_.size() || root.tape_gen != gen_) {
    fail("backward: root tensor is not on this tape");
  }
  backward_done_ = true;
  grads_.assign(nodes_.size(), Tensor{});
  grads_[(size_t)root.node] = Tensor(root.shape, 1.0);
  for (int id = root.node; id >= 0; --id) {
    if (grads_[(size_t)id].data.empty()) continue;
    if (!nodes_[(size_t)id].is_leaf) backward_node(id, grads_[(size_t)id]);
  }
}

/* ------------------------------------------------------------------ */
/* op forwards                                                         */

namespace {

Tensor binary_elementwise(OpKind kind, const Tensor& a, const Tensor& b) {
  const char* name = op_name(kind);
  Tensor out;
  if (a.shape == b.shape) {
    out = Tensor(a.shape);
    const size_t n = a.data.size();
    if (kind == OpKind::add) {
      for (size_t i = 0; i < n; ++i) out.data[i] = a.data[i] + b.data[i];
    } else {
      for (size_t i = 0; i < n; ++i) out.data[i] = a.data[i] * b.data[i];
    }
  } else {
    out = Tensor(broadcast_shape(name, a.shape, b.shape));
    broadcast_walk(out.shape, a.shape, b.shape, [&](int64_t i, int64_t oa, int64_t ob) {
      out.data[(size_t)i] = kind == OpKind::add ? a.data[(size_t)oa] + b.data[(size_t)ob]
                                                : a.data[(size_t)oa] * b.data[(size_t)ob];
    });
  }
  std::vector<Tensor> saved;
  if (kind == OpKind::mul) saved = {a, b};
  return record_op(kind, {a, b}, {}, std::move(out), std::move(saved));
}

struct MatShape {
  int batch;  // 0 when both operands are 2-D
  int m, k, n;
  int a_rows, a_cols, b_rows, b_cols;
};

MatShape matmul_shape(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if ((a.rank() != 2 && a.rank() != 3) || (b.rank() != 2 && b.rank() != 3)) {
    fail("op matmul: operands must be rank 2 or 3, got " + shape_str(a.shape) + " and " +
         shape_str(b.shape));
  }
  int ab = a.rank() == 3 ? a.shape[0] : 0;
  int bb = b.rank() == 3 ? b.shape[0] : 0;
  if (ab && bb && ab != bb) {
    fail("op matmul: batch dims differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  MatShape s;
  s.batch = std::max(ab, bb);
  s.a_rows = a.shape[a.rank() - 2];
  s.a_cols = a.shape[a.rank() - 1];
  s.b_rows = b.shape[b.rank() - 2];
  s.b_cols = b.shape[b.rank() - 1];
  s.m = ta ? s.a_cols : s.a_rows;
  int ka = ta ? s.a_rows : s.a_cols;
  int kb = tb ? s.b_cols : s.b_rows;
  s.n = tb ? s.b_rows : s.b_cols;
  if (ka != kb) {
    fail("op matmul: inner dims differ, " + shape_str(a.shape) + (ta ? " (transposed)" : "") +
         " vs " + shape_str(b.shape) + (tb ? " (transposed)" : ""));
  }
  s.k = ka;
  return s;
}

void transpose_slice(const double* src, double* dst, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) dst[(size_t)c * rows + r] = src[(size_t)r * cols + c];
  }
}

// C (m x n) += A (m x k) * B, with B given as (k x n) or, when tb, (n x k).
void gemm_acc(const double* A, const double* B, double* C, int m, int k, int n, bool tb) {
  if (!tb) {
    for (int i = 0; i < m; ++i) {
      double* crow = C + (size_t)i * n;
      const double* arow = A + (size_t)i * k;
      for (int kk = 0; kk < k; ++kk) {
        double av = arow[kk];
        const double* brow = B + (size_t)kk * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      double* crow = C + (size_t)i * n;
      const double* arow = A + (size_t)i * k;
      for (int j = 0; j < n; ++j) {
        const double* brow = B + (size_t)j * k;
        double acc = 0.0;
        for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] += acc;
      }
    }
  }
}

// out (m x n) += op_a(A) * op_b(B) for one slice, materializing A^T if needed.
void matmul_slice(const double* A, const double* B, double* out, const MatShape& s, bool ta,
                  bool tb) {
  if (!ta) {
    gemm_acc(A, B, out, s.m, s.k, s.n, tb);
  } else {
    std::vector<double> at((size_t)s.m * s.k);
    transpose_slice(A, at.data(), s.a_rows, s.a_cols);
    gemm_acc(at.data(), B, out, s.m, s.k, s.n, tb);
  }
}

double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

struct AxisSpan {
  int64_t outer, n, inner;
};

AxisSpan axis_span(const std::vector<int>& shape, int axis, const char* op) {
  if (axis < 0 || axis >= (int)shape.size()) {
    fail(std::string("op ") + op + ": axis " + std::to_string(axis) + " out of range for shape " +
         shape_str(shape));
  }
  AxisSpan s{1, shape[(size_t)axis], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[(size_t)i];
  for (int i = axis + 1; i < (int)shape.size(); ++i) s.inner *= shape[(size_t)i];
  return s;
}

struct GroupSpan {
  int64_t groups_total;  // B * G
  int64_t group_size;    // (C/G) * H * W
  int64_t spatial;       // H * W
  int channels_per_group;
};

GroupSpan group_span(const Tensor& x, int group_count) {
  if (x.rank() != 4) {
    fail("op normalize: expected (B,C,H,W) input, got " + shape_str(x.shape));
  }
  int c = x.shape[1];
  if (group_count < 1 || c % group_count != 0) {
    fail("op normalize: group_count " + std::to_string(group_count) +
         " does not divide channels of " + shape_str(x.shape));
  }
  GroupSpan g;
  g.spatial = (int64_t)x.shape[2] * x.shape[3];
  g.channels_per_group = c / group_count;
  g.group_size = g.spatial * g.channels_per_group;
  g.groups_total = (int64_t)x.shape[0] * group_count;
  return g;
}

struct ConvDims {
  int B, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    fail("op conv2d: expected input (B,Cin,H,W) and weight (Cout,Cin,kh,kw), got " +
         shape_str(x.shape) + " and " + shape_str(w.shape));
  }
  if (x.shape[1] != w.shape[1]) {
    fail("op conv2d: input channels of " + shape_str(x.shape) + " do not match weight " +
         shape_str(w.shape));
  }
  if (stride < 1 || padding < 0) {
    fail("op conv2d: invalid stride/padding " + std::to_string(stride) + "/" +
         std::to_string(padding));
  }
  ConvDims d;
  d.B = x.shape[0];
  d.Ci = x.shape[1];
  d.H = x.shape[2];
  d.W = x.shape[3];
  d.Co = w.shape[0];
  d.kh = w.shape[2];
  d.kw = w.shape[3];
  d.stride = stride;
  d.pad = padding;
  d.Ho = (d.H + 2 * padding - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * padding - d.kw) / stride + 1;
  if (d.kh > d.H + 2 * padding || d.kw > d.W + 2 * padding || d.Ho < 1 || d.Wo < 1) {
    fail("op conv2d: kernel " + shape_str(w.shape) + " too large for input " +
         shape_str(x.shape) + " with padding " + std::to_string(padding));
  }
  return d;
}

// Valid output range along one spatial axis for kernel offset r:
// positions o with 0 <= o*stride - pad + r < extent.
inline void conv_bounds(int extent, int out_extent, int stride, int pad, int r, int& lo,
                        int& hi) {
  int shift = pad - r;  // in = o*stride - shift
  lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  int last = extent - 1 + shift;
  hi = last < 0 ? -1 : std::min(out_extent - 1, last / stride);
}

void conv_forward_kernel(const double* x, const double* w, double* out, const ConvDims& d) {
  int64_t planes = (int64_t)d.B * d.Co;
  auto work = [&](int64_t pb, int64_t pe) {
    for (int64_t p = pb; p < pe; ++p) {
      int b = (int)(p / d.Co);
      int co = (int)(p % d.Co);
      double* oplane = out + ((size_t)b * d.Co + co) * d.Ho * d.Wo;
      for (int ci = 0; ci < d.Ci; ++ci) {
        const double* iplane = x + ((size_t)b * d.Ci + ci) * d.H * d.W;
        const double* wbase = w + ((size_t)co * d.Ci + ci) * d.kh * d.kw;
        for (int r = 0; r < d.kh; ++r) {
          int oh_lo, oh_hi;
          conv_bounds(d.H, d.Ho, d.stride, d.pad, r, oh_lo, oh_hi);
          for (int q = 0; q < d.kw; ++q) {
            double wv = wbase[r * d.kw + q];
            if (wv == 0.0) continue;
            int ow_lo, ow_hi;
            conv_bounds(d.W, d.Wo, d.stride, d.pad, q, ow_lo, ow_hi);
            int shift_h = r - d.pad, shift_w = q - d.pad;
            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
              const double* irow = iplane + (size_t)(oh * d.stride + shift_h) * d.W + shift_w;
              double* orow = oplane + (size_t)oh * d.Wo;
              if (d.stride == 1) {
                for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * irow[ow];
              } else {
                for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * irow[ow * d.stride];
              }
            }
          }
        }
      }
    }
  };
  int64_t flops = planes * d.Ci * d.kh * d.kw * d.Ho * d.Wo;
  if (flops >= kParallelCutoff) {
    parallel_for(planes, work);
  } else {
    work(0, planes);
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(OpKind::add, a, b); }

Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(OpKind::mul, a, b); }

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  MatShape s = matmul_shape(a, b, transpose_a, transpose_b);
  std::vector<int> out_shape =
      s.batch ? std::vector<int>{s.batch, s.m, s.n} : std::vector<int>{s.m, s.n};
  Tensor out(out_shape);
  int slices = std::max(1, s.batch);
  int64_t a_step = a.rank() == 3 ? (int64_t)s.a_rows * s.a_cols : 0;
  int64_t b_step = b.rank() == 3 ? (int64_t)s.b_rows * s.b_cols : 0;
  for (int i = 0; i < slices; ++i) {
    matmul_slice(a.data.data() + i * a_step, b.data.data() + i * b_step,
                 out.data.data() + (size_t)i * s.m * s.n, s, transpose_a, transpose_b);
  }
  OpAttrs attrs;
  attrs.transpose_a = transpose_a;
  attrs.transpose_b = transpose_b;
  return record_op(OpKind::matmul, {a, b}, attrs, std::move(out), {a, b});
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  ConvDims d = conv_dims(x, w, stride, padding);
  Tensor out(std::vector<int>{d.B, d.Co, d.Ho, d.Wo});
  conv_forward_kernel(x.data.data(), w.data.data(), out.data.data(), d);
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  return record_op(OpKind::conv2d, {x, w}, attrs, std::move(out), {x, w});
}

Tensor silu(const Tensor& x) {
  Tensor out(x.shape);
  const size_t n = x.data.size();
  auto work = [&](int64_t b, int64_t e) {
    for (int64_t i = b; i < e; ++i) {
      double v = x.data[(size_t)i];
      out.data[(size_t)i] = v * sigmoid_stable(v);
    }
  };
  if ((int64_t)n >= kParallelCutoff) {
    parallel_for((int64_t)n, work);
  } else {
    work(0, (int64_t)n);
  }
  return record_op(OpKind::silu, {x}, {}, std::move(out), {x});
}

Tensor softmax(const Tensor& x, int axis) {
  AxisSpan s = axis_span(x.shape, axis, "softmax");
  Tensor out(x.shape);
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t in = 0; in < s.inner; ++in) {
      const int64_t base = o * s.n * s.inner + in;
      double mx = x.data[(size_t)base];
      for (int64_t i = 1; i < s.n; ++i) {
        mx = std::max(mx, x.data[(size_t)(base + i * s.inner)]);
      }
      double sum = 0.0;
      for (int64_t i = 0; i < s.n; ++i) {
        double e = std::exp(x.data[(size_t)(base + i * s.inner)] - mx);
        out.data[(size_t)(base + i * s.inner)] = e;
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int64_t i = 0; i < s.n; ++i) out.data[(size_t)(base + i * s.inner)] *= inv;
    }
  }
  OpAttrs attrs;
  attrs.axis = axis;
  Tensor saved_out = out;
  return record_op(OpKind::softmax, {x}, attrs, std::move(out), {std::move(saved_out)});
}

Tensor group_normalize(const Tensor& x, int group_count, double epsilon) {
  GroupSpan g = group_span(x, group_count);
  Tensor out(x.shape);
  for (int64_t grp = 0; grp < g.groups_total; ++grp) {
    const double* src = x.data.data() + grp * g.group_size;
    double* dst = out.data.data() + grp * g.group_size;
    double mean = 0.0;
    for (int64_t i = 0; i < g.group_size; ++i) mean += src[i];
    mean /= (double)g.group_size;
    double var = 0.0;
    for (int64_t i = 0; i < g.group_size; ++i) {
      double d = src[i] - mean;
      var += d * d;
    }
    var /= (double)g.group_size;
    double inv = 1.0 / std::sqrt(var + epsilon);
    for (int64_t i = 0; i < g.group_size; ++i) dst[i] = (src[i] - mean) * inv;
  }
  OpAttrs attrs;
  attrs.group_count = group_count;
  attrs.epsilon = epsilon;
  return record_op(OpKind::normalize, {x}, attrs, std::move(out), {x});
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    fail("op reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(new_shape));
  }
  Tensor out;
  out.shape = new_shape;
  out.data = x.data;
  OpAttrs attrs;
  attrs.shape = std::move(new_shape);
  return record_op(OpKind::reshape, {x}, attrs, std::move(out), {});
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) fail("op concat: no inputs");
  const Tensor& first = xs[0];
  AxisSpan s0 = axis_span(first.shape, axis, "concat");
  int total_axis = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != first.rank()) {
      fail("op concat: rank mismatch between " + shape_str(first.shape) + " and " +
           shape_str(t.shape));
    }
    for (int d = 0; d < t.rank(); ++d) {
      if (d != axis && t.shape[(size_t)d] != first.shape[(size_t)d]) {
        fail("op concat: shapes " + shape_str(first.shape) + " and " + shape_str(t.shape) +
             " differ off-axis");
      }
    }
    total_axis += t.shape[(size_t)axis];
  }
  std::vector<int> out_shape = first.shape;
  out_shape[(size_t)axis] = total_axis;
  Tensor out(out_shape);
  int64_t row = s0.inner;
  for (int64_t o = 0; o < s0.outer; ++o) {
    double* dst = out.data.data() + o * total_axis * row;
    for (const Tensor& t : xs) {
      int64_t span = (int64_t)t.shape[(size_t)axis] * row;
      std::memcpy(dst, t.data.data() + o * span, (size_t)span * sizeof(double));
      dst += span;
    }
  }
  OpAttrs attrs;
  attrs.axis = axis;
  return record_op(OpKind::concat, xs, attrs, std::move(out), {});
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  AxisSpan s = axis_span(x.shape, axis, "slice");
  if (start < 0 || length < 1 || start + length > (int)s.n) {
    fail("op slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
         ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape));
  }
  std::vector<int> out_shape = x.shape;
  out_shape[(size_t)axis] = length;
  Tensor out(out_shape);
  for (int64_t o = 0; o < s.outer; ++o) {
    const double* src = x.data.data() + (o * s.n + start) * s.inner;
    std::memcpy(out.data.data() + o * length * s.inner, src,
                (size_t)(length * s.inner) * sizeof(double));
  }
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.start = start;
  attrs.length = length;
  return record_op(OpKind::slice, {x}, attrs, std::move(out), {});
}

Tensor embed_lookup(const Tensor& table, const std::vector<int>& indices) {
  if (table.rank() != 2) {
    fail("op embed_lookup: table must be 2-D, got " + shape_str(table.shape));
  }
  int vocab = table.shape[0], dim = table.shape[1];
  for (int idx : indices) {
    if (idx < 0 || idx >= vocab) {
      fail("op embed_lookup: index " + std::to_string(idx) + " out of range for table " +
           shape_str(table.shape));
    }
  }
  Tensor out(std::vector<int>{(int)indices.size(), dim});
  for (size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(out.data.data() + i * (size_t)dim,
                table.data.data() + (size_t)indices[i] * dim, (size_t)dim * sizeof(double));
  }
  OpAttrs attrs;
  attrs.indices = indices;
  return record_op(OpKind::embed_lookup, {table}, attrs, std::move(out), {});
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape);
  for (size_t i = 0; i < x.data.size(); ++i) out.data[i] = x.data[i] * factor;
  OpAttrs attrs;
  attrs.factor = factor;
  return record_op(OpKind::scale, {x}, attrs, std::move(out), {});
}

Tensor apply_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  auto want = [&](size_t n) {
    if (inputs.size() != n) {
      fail(std::string("op ") + op_name(kind) + ": expected " + std::to_string(n) +
           " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::add: want(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: want(2); return mul(inputs[0], inputs[1]);
    case OpKind::matmul:
      want(2);
      return matmul(inputs[0], inputs[1], attrs.transpose_a, attrs.transpose_b);
    case OpKind::conv2d: want(2); return conv2d(inputs[0], inputs[1], attrs.stride, attrs.padding);
    case OpKind::silu: want(1); return silu(inputs[0]);
    case OpKind::softmax: want(1); return softmax(inputs[0], attrs.axis);
    case OpKind::normalize:
      want(1);
      return group_normalize(inputs[0], attrs.group_count, attrs.epsilon);
    case OpKind::reshape: want(1); return reshape(inputs[0], attrs.shape);
    case OpKind::concat: return concat(inputs, attrs.axis);
    case OpKind::slice: want(1); return slice(inputs[0], attrs.axis, attrs.start, attrs.length);
    case OpKind::embed_lookup: want(1); return embed_lookup(inputs[0], attrs.indices);
    case OpKind::scale: want(1); return scale(inputs[0], attrs.factor);
  }
  fail("apply_op: unknown op kind");
}

Tensor apply_op(const std::string& kind, const std::vector<Tensor>& inputs,
                const OpAttrs& attrs) {
  return apply_op(op_kind_from_name(kind), inputs, attrs);
}

/* ------------------------------------------------------------------ */
/* op backwards                                                        */

void Tape::backward_node(int id, const Tensor& g) {
  const Node& n = nodes_[(size_t)id];
  switch (n.kind) {
    case OpKind::add: {
      for (int side = 0; side < 2; ++side) {
        if (n.inputs[(size_t)side] < 0) continue;
        Tensor d(n.in_shapes[(size_t)side]);
        reduce_into(d, g, nullptr, {});
        accumulate(n.inputs[(size_t)side], d);
      }
      break;
    }
    case OpKind::mul: {
      const Tensor& a = n.saved[0];
      const Tensor& b = n.saved[1];
      if (n.inputs[0] >= 0) {
        Tensor d(a.shape);
        reduce_into(d, g, &b, b.shape);
        accumulate(n.inputs[0], d);
      }
      if (n.inputs[1] >= 0) {
        Tensor d(b.shape);
        reduce_into(d, g, &a, a.shape);
        accumulate(n.inputs[1], d);
      }
      break;
    }
    case OpKind::matmul: {
      const Tensor& a = n.saved[0];
      const Tensor& b = n.saved[1];
      bool ta = n.attrs.transpose_a, tb = n.attrs.transpose_b;
      MatShape s = matmul_shape(a, b, ta, tb);
      int slices = std::max(1, s.batch);
      int64_t a_step = a.rank() == 3 ? (int64_t)s.a_rows * s.a_cols : 0;
      int64_t b_step = b.rank() == 3 ? (int64_t)s.b_rows * s.b_cols : 0;
      Tensor da(a.shape), db(b.shape);
      std::vector<double> dm((size_t)s.m * s.k), dn((size_t)s.k * s.n);
      for (int i = 0; i < slices; ++i) {
        const double* as = a.data.data() + i * a_step;
        const double* bs = b.data.data() + i * b_step;
        const double* gs = g.data.data() + (size_t)i * s.m * s.n;
        if (n.inputs[0] >= 0) {
          // d(effective A) = G * (effective B)^T
          std::fill(dm.begin(), dm.end(), 0.0);
          MatShape ms{0, s.m, s.n, s.k, s.m, s.n, s.b_rows, s.b_cols};
          matmul_slice(gs, bs, dm.data(), ms, false, !tb);
          double* dst = da.data.data() + i * a_step;
          if (ta) {
            for (int r = 0; r < s.m; ++r) {
              for (int c = 0; c < s.k; ++c) dst[(size_t)c * s.m + r] += dm[(size_t)r * s.k + c];
            }
          } else {
            for (size_t v = 0; v < dm.size(); ++v) dst[v] += dm[v];
          }
        }
        if (n.inputs[1] >= 0) {
          // d(effective B) = (effective A)^T * G
          std::fill(dn.begin(), dn.end(), 0.0);
          MatShape ns{0, s.k, s.m, s.n, s.a_rows, s.a_cols, s.m, s.n};
          matmul_slice(as, gs, dn.data(), ns, !ta, false);
          double* dst = db.data.data() + i * b_step;
          if (tb) {
            for (int r = 0; r < s.k; ++r) {
              for (int c = 0; c < s.n; ++c) dst[(size_t)c * s.k + r] += dn[(size_t)r * s.n + c];
            }
          } else {
            for (size_t v = 0; v < dn.size(); ++v) dst[v] += dn[v];
          }
        }
      }
      if (n.inputs[0] >= 0) accumulate(n.inputs[0], da);
      if (n.inputs[1] >= 0) accumulate(n.inputs[1], db);
      break;
    }
    case OpKind::conv2d: {
      const Tensor& x = n.saved[0];
      const Tensor& w = n.saved[1];
      ConvDims d = conv_dims(x, w, n.attrs.stride, n.attrs.padding);
      if (n.inputs[1] >= 0) {
        Tensor dw(w.shape);
        auto work = [&](int64_t cb, int64_t ce) {
          for (int64_t co = cb; co < ce; ++co) {
            for (int ci = 0; ci < d.Ci; ++ci) {
              double* wbase = dw.data.data() + ((size_t)co * d.Ci + ci) * d.kh * d.kw;
              for (int r = 0; r < d.kh; ++r) {
                int oh_lo, oh_hi;
                conv_bounds(d.H, d.Ho, d.stride, d.pad, r, oh_lo, oh_hi);
                for (int q = 0; q < d.kw; ++q) {
                  int ow_lo, ow_hi;
                  conv_bounds(d.W, d.Wo, d.stride, d.pad, q, ow_lo, ow_hi);
                  int shift_h = r - d.pad, shift_w = q - d.pad;
                  double acc = 0.0;
                  for (int b = 0; b < d.B; ++b) {
                    const double* iplane = x.data.data() + ((size_t)b * d.Ci + ci) * d.H * d.W;
                    const double* gplane =
                        g.data.data() + ((size_t)b * d.Co + co) * d.Ho * d.Wo;
                    for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                      const double* irow =
                          iplane + (size_t)(oh * d.stride + shift_h) * d.W + shift_w;
                      const double* grow = gplane + (size_t)oh * d.Wo;
                      for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                        acc += grow[ow] * irow[ow * d.stride];
                      }
                    }
                  }
                  wbase[r * d.kw + q] += acc;
                }
              }
            }
          }
        };
        if ((int64_t)d.B * d.Co * d.Ci * d.kh * d.kw * d.Ho * d.Wo >= kParallelCutoff) {
          parallel_for(d.Co, work);
        } else {
          work(0, d.Co);
        }
        accumulate(n.inputs[1], dw);
      }
      if (n.inputs[0] >= 0) {
        Tensor dx(x.shape);
        auto work = [&](int64_t bb, int64_t be) {
          for (int64_t b = bb; b < be; ++b) {
            for (int co = 0; co < d.Co; ++co) {
              const double* gplane = g.data.data() + ((size_t)b * d.Co + co) * d.Ho * d.Wo;
              for (int ci = 0; ci < d.Ci; ++ci) {
                double* dplane = dx.data.data() + ((size_t)b * d.Ci + ci) * d.H * d.W;
                const double* wbase = w.data.data() + ((size_t)co * d.Ci + ci) * d.kh * d.kw;
                for (int r = 0; r < d.kh; ++r) {
                  int oh_lo, oh_hi;
                  conv_bounds(d.H, d.Ho, d.stride, d.pad, r, oh_lo, oh_hi);
                  for (int q = 0; q < d.kw; ++q) {
                    double wv = wbase[r * d.kw + q];
                    if (wv == 0.0) continue;
                    int ow_lo, ow_hi;
                    conv_bounds(d.W, d.Wo, d.stride, d.pad, q, ow_lo, ow_hi);
                    int shift_h = r - d.pad, shift_w = q - d.pad;
                    for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                      double* drow = dplane + (size_t)(oh * d.stride + shift_h) * d.W + shift_w;
                      const double* grow = gplane + (size_t)oh * d.Wo;
                      for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                        drow[ow * d.stride] += wv * grow[ow];
                      }
                    }
                  }
                }
              }
            }
          }
        };
        if ((int64_t)d.B * d.Co * d.Ci * d.kh * d.kw * d.Ho * d.Wo >= kParallelCutoff) {
          parallel_for(d.B, work);
        } else {
          work(0, d.B);
        }
        accumulate(n.inputs[0], dx);
      }
      break;
    }
    case OpKind::silu: {
      if (n.inputs[0] < 0) break;
      const Tensor& x = n.saved[0];
      Tensor dx(x.shape);
      for (size_t i = 0; i < x.data.size(); ++i) {
        double s = sigmoid_stable(x.data[i]);
        dx.data[i] = g.data[i] * s * (1.0 + x.data[i] * (1.0 - s));
      }
      accumulate(n.inputs[0], dx);
      break;
    }
    case OpKind::softmax: {
      if (n.inputs[0] < 0) break;
      const Tensor& y = n.saved[0];
      AxisSpan s = axis_span(y.shape, n.attrs.axis, "softmax");
      Tensor dx(y.shape);
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t in = 0; in < s.inner; ++in) {
          const int64_t base = o * s.n * s.inner + in;
          double dot = 0.0;
          for (int64_t i = 0; i < s.n; ++i) {
            size_t k = (size_t)(base + i * s.inner);
            dot += g.data[k] * y.data[k];
          }
          for (int64_t i = 0; i < s.n; ++i) {
            size_t k = (size_t)(base + i * s.inner);
            dx.data[k] = y.data[k] * (g.data[k] - dot);
          }
        }
      }
      accumulate(n.inputs[0], dx);
      break;
    }
    case OpKind::normalize: {
      if (n.inputs[0] < 0) break;
      const Tensor& x = n.saved[0];
      GroupSpan gs = group_span(x, n.attrs.group_count);
      Tensor dx(x.shape);
      for (int64_t grp = 0; grp < gs.groups_total; ++grp) {
        const double* src = x.data.data() + grp * gs.group_size;
        const double* gg = g.data.data() + grp * gs.group_size;
        double* dst = dx.data.data() + grp * gs.group_size;
        double mean = 0.0;
        for (int64_t i = 0; i < gs.group_size; ++i) mean += src[i];
        mean /= (double)gs.group_size;
        double var = 0.0;
        for (int64_t i = 0; i < gs.group_size; ++i) {
          double dv = src[i] - mean;
          var += dv * dv;
        }
        var /= (double)gs.group_size;
        double inv = 1.0 / std::sqrt(var + n.attrs.epsilon);
        double gmean = 0.0, gxmean = 0.0;
        for (int64_t i = 0; i < gs.group_size; ++i) {
          double xh = (src[i] - mean) * inv;
          gmean += gg[i];
          gxmean += gg[i] * xh;
        }
        gmean /= (double)gs.group_size;
        gxmean /= (double)gs.group_size;
        for (int64_t i = 0; i < gs.group_size; ++i) {
          double xh = (src[i] - mean) * inv;
          dst[i] = inv * (gg[i] - gmean - xh * gxmean);
        }
      }
      accumulate(n.inputs[0], dx);
      break;
    }
    case OpKind::reshape: {
      if (n.inputs[0] < 0) break;
      Tensor dx;
      dx.shape = n.in_shapes[0];
      dx.data = g.data;
      dx.node = -1;
      accumulate(n.inputs[0], dx);
      break;
    }
    case OpKind::concat: {
      AxisSpan s = axis_span(n.out_shape, n.attrs.axis, "concat");
      int64_t row = s.inner;
      int64_t offset = 0;
      for (size_t part = 0; part < n.inputs.size(); ++part) {
        int64_t span = (int64_t)n.in_shapes[part][(size_t)n.attrs.axis] * row;
        if (n.inputs[part] >= 0) {
          Tensor d(n.in_shapes[part]);
          for (int64_t o = 0; o < s.outer; ++o) {
            std::memcpy(d.data.data() + o * span,
                        g.data.data() + o * s.n * row + offset, (size_t)span * sizeof(double));
          }
          accumulate(n.inputs[part], d);
        }
        offset += span;
      }
      break;
    }
    case OpKind::slice: {
      if (n.inputs[0] < 0) break;
      AxisSpan s = axis_span(n.in_shapes[0], n.attrs.axis, "slice");
      Tensor dx(n.in_shapes[0]);
      int64_t span = (int64_t)n.attrs.length * s.inner;
      for (int64_t o = 0; o < s.outer; ++o) {
        std::memcpy(dx.data.data() + (o * s.n + n.attrs.start) * s.inner,
                    g.data.data() + o * span, (size_t)span * sizeof(double));
      }
      accumulate(n.inputs[0], dx);
      break;
    }
    case OpKind::embed_lookup: {
      if (n.inputs[0] < 0) break;
      Tensor dt(n.in_shapes[0]);
      int dim = n.in_shapes[0][1];
      for (size_t i = 0; i < n.attrs.indices.size(); ++i) {
        double* row = dt.data.data() + (size_t)n.attrs.indices[i] * dim;
        const double* grow = g.data.data() + i * (size_t)dim;
        for (int j = 0; j < dim; ++j) row[j] += grow[j];
      }
      accumulate(n.inputs[0], dt);
      break;
    }
    case OpKind::scale: {
      if (n.inputs[0] < 0) break;
      Tensor dx(n.in_shapes[0]);
      for (size_t i = 0; i < g.data.size(); ++i) dx.data[i] = g.data[i] * n.attrs.factor;
      accumulate(n.inputs[0], dx);
      break;
    }
  }
}

/* ------------------------------------------------------------------ */
/* gradient checking                                                   */

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& params, double step) {
  if (!(step > 0.0)) fail("grad_check: step must be positive");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
    Tensor loss = f(leaves);
    if (loss.numel() != 1) {
      fail("grad_check: function must return a scalar, got " + shape_str(loss.shape));
    }
    if (!std::isfinite(loss.value())) {
      throw std::domain_error("grad_check: non-finite function value");
    }
    tape.backward(loss);
    for (const Tensor& leaf : leaves) {
      analytic.push_back(tape.has_gradient(leaf.node) ? tape.gradient(leaf.node)
                                                      : Tensor(leaf.shape, 0.0));
    }
  }

  double worst = 0.0;
  std::vector<Tensor> probe = params;
  for (size_t pi = 0; pi < probe.size(); ++pi) {
    for (size_t j = 0; j < probe[pi].data.size(); ++j) {
      double saved = probe[pi].data[j];
      probe[pi].data[j] = saved + step;
      double up = f(probe).value();
      probe[pi].data[j] = saved - step;
      double dn = f(probe).value();
      probe[pi].data[j] = saved;
      if (!std::isfinite(up) || !std::isfinite(dn)) {
        throw std::domain_error("grad_check: non-finite function value");
      }
      double numeric = (up - dn) / (2.0 * step);
      double a = analytic[pi].data[j];
      double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ddpm
