#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "tensor.hpp"

using namespace ddpm;
using namespace ddpm::testing;

TEST_CASE("elementwise and matmul basics") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  Tensor sum = add(a, b);
  CHECK(sum.data == std::vector<double>{4, 6});

  Rng rng(7);
  Tensor m = rand_tensor({3, 3}, rng);
  Tensor eye(std::vector<int>{3, 3});
  for (int i = 0; i < 3; ++i) eye.data[(size_t)(i * 3 + i)] = 1.0;
  Tensor prod = matmul(eye, m);
  CHECK(max_abs_diff(prod, m) == 0.0);

  Tensor s = softmax(Tensor::from({2}, {0, 0}), 0);
  CHECK(s.data[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.data[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("rejections name the op and shapes") {
  CHECK_THROWS_WITH_AS(apply_op("frobnicate", {}), doctest::Contains("unknown op kind"),
                       std::invalid_argument);
  Tensor a(std::vector<int>{2, 3});
  Tensor b(std::vector<int>{4});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("(2,3)"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("(4)"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(matmul(Tensor(std::vector<int>{2, 3}), Tensor(std::vector<int>{2, 3})),
                       doctest::Contains("matmul"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(conv2d(Tensor(std::vector<int>{1, 3, 4, 4}),
                              Tensor(std::vector<int>{2, 4, 3, 3})),
                       doctest::Contains("conv2d"), std::invalid_argument);
  CHECK_THROWS_AS(group_normalize(Tensor(std::vector<int>{1, 3, 2, 2}), 2),
                  std::invalid_argument);
  CHECK_THROWS_AS(slice(Tensor(std::vector<int>{2, 3}), 1, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(embed_lookup(Tensor(std::vector<int>{4, 2}), {4}), std::invalid_argument);
}

TEST_CASE("backward of x*x and of a plain sum") {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(Tensor::scalar(3.0));
  Tensor y = reshape(mul(x, x), {1, 1});
  tape.backward(y);
  CHECK(tape.gradient(x.node).data[0] == doctest::Approx(6.0).epsilon(1e-15));

  Tape tape2;
  TapeScope scope2(tape2);
  Tensor v = tape2.leaf(Tensor::from({3}, {1, -2, 5}));
  Tensor total = sum_all(v);
  tape2.backward(total);
  CHECK(tape2.gradient(v.node).data == std::vector<double>{1, 1, 1});
  CHECK(tape2.gradient(total.node).data == std::vector<double>{1});
}

TEST_CASE("backward rejects bad roots and reuse") {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
  Tensor y = silu(x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);  // non-scalar
  Tensor constant = Tensor::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(constant), std::invalid_argument);  // not on tape
  Tensor loss = sum_all(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);  // single-use
}

TEST_CASE("conv2d matches the quadruple-loop oracle") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(mix_seed(42, seed));
    int B = 1 + (int)rng.below(2);
    int Ci = 1 + (int)rng.below(3);
    int Co = 1 + (int)rng.below(3);
    int H = 4 + (int)rng.below(5);
    int W = 4 + (int)rng.below(5);
    int k = rng.below(2) ? 3 : 1;
    int stride = 1 + (int)rng.below(2);
    int pad = (int)rng.below(2);
    Tensor x = rand_tensor({B, Ci, H, W}, rng);
    Tensor w = rand_tensor({Co, Ci, k, k}, rng);
    Tensor got = conv2d(x, w, stride, pad);
    Tensor want = naive_conv2d(x, w, stride, pad);
    REQUIRE(got.shape == want.shape);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("matmul flag combinations match the plain oracle") {
  Rng rng(11);
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 5}, rng);
  Tensor at = rand_tensor({4, 3}, rng);
  Tensor bt = rand_tensor({5, 4}, rng);

  auto transpose = [](const Tensor& m) {
    Tensor out(std::vector<int>{m.shape[1], m.shape[0]});
    for (int r = 0; r < m.shape[0]; ++r) {
      for (int c = 0; c < m.shape[1]; ++c) {
        out.data[(size_t)(c * m.shape[0] + r)] = m.data[(size_t)(r * m.shape[1] + c)];
      }
    }
    return out;
  };

  CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
  CHECK(max_abs_diff(matmul(at, b, true, false), naive_matmul(transpose(at), b)) < 1e-12);
  CHECK(max_abs_diff(matmul(a, bt, false, true), naive_matmul(a, transpose(bt))) < 1e-12);
  CHECK(max_abs_diff(matmul(at, bt, true, true),
                     naive_matmul(transpose(at), transpose(bt))) < 1e-12);

  // batched, and batched against a shared 2-D operand
  Tensor a3 = rand_tensor({2, 3, 4}, rng);
  Tensor b3 = rand_tensor({2, 4, 5}, rng);
  Tensor full = matmul(a3, b3);
  for (int s = 0; s < 2; ++s) {
    Tensor as = Tensor::from({3, 4}, std::vector<double>(a3.data.begin() + s * 12,
                                                         a3.data.begin() + (s + 1) * 12));
    Tensor bs = Tensor::from({4, 5}, std::vector<double>(b3.data.begin() + s * 20,
                                                         b3.data.begin() + (s + 1) * 20));
    Tensor want = naive_matmul(as, bs);
    for (int i = 0; i < 15; ++i) {
      CHECK(full.data[(size_t)(s * 15 + i)] == doctest::Approx(want.data[(size_t)i]).epsilon(1e-12));
    }
  }
  Tensor shared = matmul(a3, b);
  for (int s = 0; s < 2; ++s) {
    Tensor as = Tensor::from({3, 4}, std::vector<double>(a3.data.begin() + s * 12,
                                                         a3.data.begin() + (s + 1) * 12));
    Tensor want = naive_matmul(as, b);
    for (int i = 0; i < 15; ++i) {
      CHECK(shared.data[(size_t)(s * 15 + i)] == doctest::Approx(want.data[(size_t)i]).epsilon(1e-12));
    }
  }
}

namespace {

// One finite-difference check per op kind, randomized over seeds.
double op_grad_error(const std::string& which, uint64_t seed) {
  Rng rng(mix_seed(99, seed));
  double step = 1e-5;
  if (which == "add" || which == "mul") {
    Tensor a = rand_tensor({2, 3, 2, 2}, rng);
    Tensor b = rand_tensor({3, 1, 1}, rng);  // broadcast across batch and space
    Tensor w = rand_tensor({2, 3, 2, 2}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) {
          Tensor r = which == "add" ? add(p[0], p[1]) : mul(p[0], p[1]);
          return weighted_sum(r, w);
        },
        {a, b}, step);
  }
  if (which == "matmul") {
    Tensor a = rand_tensor({2, 4, 3}, rng);
    Tensor b = rand_tensor({4, 5}, rng);  // used transposed: (5,4) effective? no: ta on a
    Tensor w = rand_tensor({2, 3, 5}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) {
          return weighted_sum(matmul(p[0], p[1], true, false), w);
        },
        {a, b}, step);
  }
  if (which == "matmul_tb") {
    Tensor a = rand_tensor({3, 4}, rng);
    Tensor b = rand_tensor({5, 4}, rng);
    Tensor w = rand_tensor({3, 5}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) {
          return weighted_sum(matmul(p[0], p[1], false, true), w);
        },
        {a, b}, step);
  }
  if (which == "conv2d") {
    int stride = 1 + (int)rng.below(2);
    Tensor x = rand_tensor({2, 2, 5, 5}, rng);
    Tensor k = rand_tensor({3, 2, 3, 3}, rng);
    int ho = (5 + 2 - 3) / stride + 1;
    Tensor w = rand_tensor({2, 3, ho, ho}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) {
          return weighted_sum(conv2d(p[0], p[1], stride, 1), w);
        },
        {x, k}, step);
  }
  if (which == "silu") {
    Tensor x = rand_tensor({3, 4}, rng, -3.0, 3.0);
    Tensor w = rand_tensor({3, 4}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) { return weighted_sum(silu(p[0]), w); }, {x}, step);
  }
  if (which == "softmax") {
    Tensor x = rand_tensor({2, 4, 3}, rng, -2.0, 2.0);
    Tensor w = rand_tensor({2, 4, 3}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) { return weighted_sum(softmax(p[0], 1), w); }, {x},
        step);
  }
  if (which == "normalize") {
    Tensor x = rand_tensor({2, 4, 3, 3}, rng);
    Tensor w = rand_tensor({2, 4, 3, 3}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) {
          return weighted_sum(group_normalize(p[0], 2), w);
        },
        {x}, step);
  }
  if (which == "reshape_concat_slice") {
    Tensor a = rand_tensor({2, 3}, rng);
    Tensor b = rand_tensor({2, 2}, rng);
    Tensor w = rand_tensor({2, 4}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) {
          Tensor joined = concat({p[0], p[1]}, 1);          // (2,5)
          Tensor cut = slice(joined, 1, 1, 4);              // (2,4)
          Tensor shaped = reshape(cut, {4, 2});
          return weighted_sum(reshape(shaped, {2, 4}), w);
        },
        {a, b}, step);
  }
  if (which == "embed_lookup") {
    Tensor table = rand_tensor({5, 3}, rng);
    std::vector<int> idx = {1, 4, 1, 0};  // repeated row exercises scatter-add
    Tensor w = rand_tensor({4, 3}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) { return weighted_sum(embed_lookup(p[0], idx), w); },
        {table}, step);
  }
  if (which == "scale") {
    Tensor x = rand_tensor({3, 3}, rng);
    Tensor w = rand_tensor({3, 3}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) { return weighted_sum(scale(p[0], -1.7), w); }, {x},
        step);
  }
  if (which == "chain") {  // conv2d + silu + normalize, the composed check
    Tensor x = rand_tensor({1, 2, 4, 4}, rng);
    Tensor k = rand_tensor({4, 2, 3, 3}, rng);
    Tensor w = rand_tensor({1, 4, 4, 4}, rng);
    return grad_check(
        [&](const std::vector<Tensor>& p) {
          return weighted_sum(group_normalize(silu(conv2d(p[0], p[1], 1, 1)), 2), w);
        },
        {x, k}, step);
  }
  REQUIRE(false);
  return 1.0;
}

}  // namespace

TEST_CASE("every op kind passes finite-difference gradient checks over 10 seeds") {
  const char* ops[] = {"add",       "mul",     "matmul",    "matmul_tb",
                       "conv2d",    "silu",    "softmax",   "normalize",
                       "reshape_concat_slice", "embed_lookup", "scale", "chain"};
  for (const char* which : ops) {
    CAPTURE(which);
    for (uint64_t seed = 0; seed < 10; ++seed) {
      CAPTURE(seed);
      CHECK(op_grad_error(which, seed) < 1e-4);
    }
  }
}

TEST_CASE("grad_check on a quadratic is exact to roundoff") {
  Rng rng(5);
  Tensor p = rand_tensor({6}, rng);
  double err = grad_check(
      [](const std::vector<Tensor>& ps) { return sum_all(mul(ps[0], ps[0])); }, {p}, 1e-5);
  CHECK(err < 1e-9);
}

TEST_CASE("softmax-attention subgraph gradient is tight") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(mix_seed(1234, seed));
    Tensor q = rand_tensor({4, 3}, rng);
    Tensor k = rand_tensor({4, 3}, rng);
    Tensor v = rand_tensor({4, 5}, rng);
    Tensor w = rand_tensor({4, 5}, rng);
    double err = grad_check(
        [&](const std::vector<Tensor>& p) {
          Tensor logits = scale(matmul(p[0], p[1], false, true), 1.0 / std::sqrt(3.0));
          Tensor weights = softmax(logits, 1);
          return weighted_sum(matmul(weights, p[2]), w);
        },
        {q, k, v}, 1e-5);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("shared subexpressions accumulate like the expanded graph") {
  Rng rng(3);
  Tensor x0 = rand_tensor({4}, rng);

  Tensor shared_grad, expanded_grad;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = tape.leaf(x0);
    Tensor y = silu(x);
    Tensor loss = sum_all(mul(y, y));  // y feeds both sides
    tape.backward(loss);
    shared_grad = tape.gradient(x.node);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = tape.leaf(x0);
    Tensor loss = sum_all(mul(silu(x), silu(x)));  // recomputed branches
    tape.backward(loss);
    expanded_grad = tape.gradient(x.node);
  }
  CHECK(max_abs_diff(shared_grad, expanded_grad) < 1e-12);
}

TEST_CASE("forward under a tape is bit-identical to forward without one") {
  Rng rng(17);
  Tensor x = rand_tensor({2, 4, 6, 6}, rng);
  Tensor k = rand_tensor({4, 4, 3, 3}, rng);

  auto run = [&]() {
    Tensor h = conv2d(x, k, 1, 1);
    h = silu(h);
    h = group_normalize(h, 2);
    h = softmax(reshape(h, {2, 4, 36}), 2);
    return h;
  };

  Tensor plain = run();
  Tensor taped;
  {
    Tape tape;
    TapeScope scope(tape);
    taped = run();
    CHECK(taped.node >= 0);
  }
  REQUIRE(plain.data.size() == taped.data.size());
  CHECK(std::memcmp(plain.data.data(), taped.data.data(),
                    plain.data.size() * sizeof(double)) == 0);
}

TEST_CASE("forward ops keep finite inputs finite") {
  Tensor big = Tensor::from({2, 2}, {1e5, 1e5 + 1, -1e5, 0});
  CHECK(softmax(big, 1).all_finite());
  CHECK(silu(Tensor::from({3}, {-1e3, 0, 1e3})).all_finite());
  Tensor flat(std::vector<int>{1, 2, 2, 2}, 0.75);  // zero variance group
  CHECK(group_normalize(flat, 1).all_finite());
}

TEST_CASE("apply_op dispatch mirrors the typed wrappers") {
  Rng rng(23);
  Tensor a = rand_tensor({2, 2}, rng);
  Tensor b = rand_tensor({2, 2}, rng);
  OpAttrs attrs;
  CHECK(max_abs_diff(apply_op("add", {a, b}, attrs), add(a, b)) == 0.0);
  attrs.factor = 2.5;
  CHECK(max_abs_diff(apply_op("scale", {a}, attrs), scale(a, 2.5)) == 0.0);
  attrs = OpAttrs{};
  attrs.indices = {1, 0};
  CHECK(max_abs_diff(apply_op("embed_lookup", {a}, attrs), embed_lookup(a, {1, 0})) == 0.0);
}
