#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace ddpm {

// Dense row-major tensor of 64-bit floats. `node` ties the value to the
// Tape that recorded it; -1 marks a constant (no gradient flows into it).
// `tape_gen` identifies which tape the node id belongs to, so a tensor kept
// across tapes safely decays to a constant instead of aliasing a node.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  int node = -1;
  uint64_t tape_gen = 0;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);
  static Tensor scalar(double v);
  static Tensor from(std::vector<int> s, std::vector<double> d);

  int64_t numel() const;
  int rank() const { return (int)shape.size(); }
  int dim(int i) const { return shape[(size_t)i]; }

  // value of a 1-element tensor
  double value() const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

int64_t shape_numel(const std::vector<int>& s);
std::string shape_str(const std::vector<int>& s);

enum class OpKind {
  add,
  mul,
  matmul,
  conv2d,
  silu,
  softmax,
  normalize,
  reshape,
  concat,
  slice,
  embed_lookup,
  scale,
};

OpKind op_kind_from_name(const std::string& name);
const char* op_name(OpKind k);

// Per-op attributes; each op documents the fields it reads.
struct OpAttrs {
  int axis = 0;                 // softmax, concat, slice
  int stride = 1;               // conv2d
  int padding = 0;              // conv2d
  int group_count = 1;          // normalize
  double epsilon = 1e-5;        // normalize
  double factor = 1.0;          // scale
  std::vector<int> shape;       // reshape
  int start = 0;                // slice
  int length = 0;               // slice
  std::vector<int> indices;     // embed_lookup
  bool transpose_a = false;     // matmul
  bool transpose_b = false;     // matmul
};

// Uniform dispatch over the fixed op set. Throws std::invalid_argument on
// shape mismatches (message names the op and both shapes). The typed
// wrappers below are what library code calls.
Tensor apply_op(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});
Tensor apply_op(const std::string& kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// Elementwise with numpy-style broadcasting (dims aligned right, 1-dims
// stretch); gradients reduce-sum back over broadcast dims.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// 2-D x 2-D, batched 3-D x 3-D (equal batch), or mixed 3-D/2-D where the
// 2-D operand is shared across the batch. Flags transpose the trailing
// two axes of the corresponding operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

// x: (B, Cin, H, W), w: (Cout, Cin, kh, kw); zero padding, floor output size.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int padding = 0);

Tensor silu(const Tensor& x);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

// Group normalization over (B, C, H, W): per (sample, group) the mean is
// removed and the result divided by sqrt(variance + epsilon). No affine part.
Tensor group_normalize(const Tensor& x, int group_count, double epsilon = 1e-5);

Tensor reshape(const Tensor& x, std::vector<int> new_shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);

// table: (V, D); returns (indices.size(), D). Indices are attributes, not a
// differentiable input; the table gradient scatter-adds the output rows.
Tensor embed_lookup(const Tensor& table, const std::vector<int>& indices);

Tensor scale(const Tensor& x, double factor);

// Append-only record of one forward pass. Activate with TapeScope; ops
// record themselves while a tape is active and compute identical values
// either way. Single-use: run backward once, then discard.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Registers `value` as a differentiable input and returns the tracked copy.
  Tensor leaf(const Tensor& value);

  // Reverse pass from a scalar root living on this tape. Fills gradients for
  // every ancestor; fan-out accumulates by summation.
  void backward(const Tensor& root);

  bool has_gradient(int node) const;
  const Tensor& gradient(int node) const;

  // node_id -> gradient for every node touched by backward
  std::map<int, Tensor> gradient_map() const;

  size_t size() const { return nodes_.size(); }

 private:
  friend class TapeScope;
  friend Tensor record_op(OpKind, const std::vector<Tensor>&, const OpAttrs&, Tensor&&,
                          std::vector<Tensor>&&);

  struct Node {
    OpKind kind = OpKind::add;
    bool is_leaf = false;
    std::vector<int> inputs;                 // node ids, -1 for constants
    std::vector<std::vector<int>> in_shapes; // aligned with op inputs
    OpAttrs attrs;
    std::vector<Tensor> saved;               // values the backward rule needs
    std::vector<int> out_shape;
  };

  int push(Node n);
  void accumulate(int node, const Tensor& g);
  void backward_node(int id, const Tensor& g);

  uint64_t gen_ = next_generation();
  static uint64_t next_generation();

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool backward_done_ = false;
};

// RAII activation of a tape on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Central-difference gradient check. Runs f once under a fresh tape to get
// analytic gradients, then twice per parameter entry without a tape.
// Returns max over entries of |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& params, double step);

}  // namespace ddpm
