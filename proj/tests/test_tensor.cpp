#include <doctest.h>

#include <cmath>

#include "rsm/ops.hpp"
#include "support/primitive_checks.hpp"

using namespace rsm;
using rsm::testing::random_tensor;

namespace {

template <typename Real>
Tensor<Real> make(Shape shape, std::vector<Real> values, bool grad = false) {
  Tensor<Real> t = Tensor<Real>::from_values(std::move(shape), std::move(values));
  if (grad) t.ensure_grad();
  return t;
}

}  // namespace

TEST_CASE("matmul identity and zero") {
  auto a = make<double>({2, 2}, {1, 2, 3, 4});
  auto eye = make<double>({2, 2}, {1, 0, 0, 1});
  auto out = matmul(a, eye);
  for (std::size_t i = 0; i < 4; ++i) CHECK(out.at(i) == a.at(i));

  auto row = make<double>({1, 2}, {1, 2});
  auto zeros = make<double>({2, 1}, {0, 0});
  CHECK(matmul(row, zeros).at(0) == 0.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  auto a = make<double>({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = make<double>({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(matmul(a, b), shape_error);
}

TEST_CASE("rms_norm forced cases") {
  // uniform positive vector normalizes to ones as eps -> 0
  auto x = make<double>({1, 4}, {3, 3, 3, 3});
  auto gain = make<double>({4}, {1, 1, 1, 1});
  auto y = rms_norm(x, gain, 1e-12);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(1.0).epsilon(1e-6));

  auto zero = make<double>({1, 4}, {0, 0, 0, 0});
  auto yz = rms_norm(zero, gain, 1e-6);
  for (std::size_t i = 0; i < 4; ++i) CHECK(yz.at(i) == 0.0);
}

TEST_CASE("swiglu zero input and gate-saturated identity") {
  const int d = 3;
  auto zero = make<double>({1, d}, {0, 0, 0});
  auto wg = make<double>({d, d}, std::vector<double>(9, 0.3));
  auto wu = make<double>({d, d}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto wd = wu.clone_values();
  auto out = swiglu_ffn(zero, wg, wu, wd);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.0);

  // pick u* with silu(u*) = 1 so the gate contributes a factor of one
  double u = 1.0;
  for (int it = 0; it < 100; ++it) {
    const double s = 1.0 / (1.0 + std::exp(-u));
    const double f = u * s - 1.0;
    const double fp = s * (1.0 + u * (1.0 - s));
    u -= f / fp;
  }
  auto x = make<double>({1, d}, {0.4, -0.2, 0.9});
  const double row_sum = 0.4 - 0.2 + 0.9;
  auto wg_sat = make<double>({d, d}, std::vector<double>(9, u / row_sum));
  auto ident = swiglu_ffn(x, wg_sat, wu, wd);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(ident.at(i) == doctest::Approx(x.at(i)).epsilon(1e-9));
}

TEST_CASE("rope position zero is the identity and rotations preserve norms") {
  Rng rng(7);
  auto x = random_tensor<double>({2, 4, 6}, rng);
  auto tables = rope_tables<double>(4, 6, 10000.0);
  auto y = rope_apply(x, tables.first, tables.second);
  // position 0: all angles are zero
  for (int g = 0; g < 2; ++g)
    for (int j = 0; j < 6; ++j)
      CHECK(y.at(static_cast<std::size_t>(g) * 24 + j) ==
            doctest::Approx(x.at(static_cast<std::size_t>(g) * 24 + j)));
  // per-pair norms preserved everywhere
  for (std::size_t base = 0; base < x.numel(); base += 2) {
    const double nx = x.at(base) * x.at(base) + x.at(base + 1) * x.at(base + 1);
    const double ny = y.at(base) * y.at(base) + y.at(base + 1) * y.at(base + 1);
    CHECK(ny == doctest::Approx(nx).epsilon(1e-12));
  }
}

TEST_CASE("rope dot products depend only on relative position") {
  // q at position m against k at position n must reproduce the (m - n) offset
  const int hd = 8;
  const int s = 4;
  Rng rng(11);
  std::vector<double> qv(hd), kv(hd);
  for (auto& v : qv) v = rng.normal();
  for (auto& v : kv) v = rng.normal();
  auto tables = rope_tables<double>(s, hd, 10000.0);

  auto rotated_dot = [&](int m, int n) {
    std::vector<double> qs, ks;
    for (int p = 0; p < s; ++p) {
      for (double v : qv) qs.push_back(v);
      for (double v : kv) ks.push_back(v);
    }
    auto q = make<double>({1, s, hd}, qs);
    auto k = make<double>({1, s, hd}, ks);
    auto qr = rope_apply(q, tables.first, tables.second);
    auto kr = rope_apply(k, tables.first, tables.second);
    double dot = 0.0;
    for (int j = 0; j < hd; ++j)
      dot += qr.at(static_cast<std::size_t>(m) * hd + j) *
             kr.at(static_cast<std::size_t>(n) * hd + j);
    return dot;
  };
  // all pairs with equal offset agree
  CHECK(rotated_dot(1, 0) == doctest::Approx(rotated_dot(3, 2)).epsilon(1e-10));
  CHECK(rotated_dot(2, 0) == doctest::Approx(rotated_dot(3, 1)).epsilon(1e-10));
  CHECK(rotated_dot(0, 2) == doctest::Approx(rotated_dot(1, 3)).epsilon(1e-10));
}

TEST_CASE("rope rejects odd head dimensions") {
  CHECK_THROWS_AS(rope_tables<double>(4, 5, 10000.0), config_error);
}

TEST_CASE("attention single key and uniform scores") {
  Rng rng(3);
  // S=1: softmax over one key makes the output the value projection
  auto x1 = random_tensor<double>({1, 1, 4}, rng);
  auto wqkv = random_tensor<double>({4, 12}, rng);
  auto wout = random_tensor<double>({4, 4}, rng);
  auto out1 = attention(x1, wqkv, wout, 2);
  auto v = slice_last(matmul(x1, wqkv), 8, 4);
  auto expect = matmul(v, wout);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(out1.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-12));

  // zero queries give uniform scores, so the context is the mean of values
  auto q = Tensor<double>::zeros({1, 3, 4});
  auto k = random_tensor<double>({1, 3, 4}, rng);
  auto vals = random_tensor<double>({1, 3, 4}, rng);
  auto ctx = attn_core(q, k, vals);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      const double mean =
          (vals.at(j) + vals.at(4 + j) + vals.at(8 + j)) / 3.0;
      CHECK(ctx.at(static_cast<std::size_t>(i) * 4 + j) ==
            doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("attention rejects indivisible head counts") {
  Rng rng(5);
  auto x = random_tensor<double>({1, 2, 6}, rng);
  auto wqkv = random_tensor<double>({6, 18}, rng);
  auto wout = random_tensor<double>({6, 6}, rng);
  CHECK_THROWS_AS(attention(x, wqkv, wout, 4), config_error);
}

TEST_CASE("token_mix_ffn zero input, shape contract, length check") {
  Rng rng(9);
  auto zero = Tensor<double>::zeros({2, 5, 3});
  auto wg = random_tensor<double>({5, 8}, rng);
  auto wu = random_tensor<double>({5, 8}, rng);
  auto wd = random_tensor<double>({8, 5}, rng);
  auto out = token_mix_ffn(zero, wg, wu, wd);
  CHECK(out.shape == Shape{2, 5, 3});
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.0);

  auto x = random_tensor<double>({2, 4, 3}, rng);  // wrong sequence length
  CHECK_THROWS_AS(token_mix_ffn(x, wg, wu, wd), config_error);
}

TEST_CASE("cross_entropy forced values") {
  // uniform logits over V=10
  auto logits = Tensor<double>::zeros({1, 2, 10});
  auto loss = cross_entropy(logits, {3, 7}, -1);
  CHECK(loss.at(0) == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  // logit margin 20 saturates toward zero loss
  auto hot = Tensor<double>::zeros({1, 1, 5});
  hot.at(2) = 20.0;
  CHECK(cross_entropy(hot, {2}, -1).at(0) < 1e-8);

  // fully ignored batch: loss 0 with zero gradient
  Rng rng(2);
  auto l = random_tensor<double>({1, 2, 4}, rng, 1.0, true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto empty_loss = cross_entropy(l, {-1, -1}, -1);
    CHECK(empty_loss.at(0) == 0.0);
    tape.backward(empty_loss);
  }
  for (std::size_t i = 0; i < l.numel(); ++i) CHECK(l.grad->v[i] == 0.0);
}

TEST_CASE("cross_entropy rejects out-of-range targets") {
  auto logits = Tensor<double>::zeros({1, 1, 4});
  CHECK_THROWS_AS(cross_entropy(logits, {4}, -1), data_error);
}

TEST_CASE("stop_gradient cuts exactly and is forward transparent") {
  Rng rng(13);
  auto x = random_tensor<double>({2, 3}, rng, 1.0, true);
  auto w = random_tensor<double>({2, 3}, rng, 1.0, true);

  auto frozen = stop_gradient(x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(frozen.at(i) == x.at(i));
  CHECK(frozen.buf == x.buf);  // bit-exact by shared storage

  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto loss = sum_all(mul(frozen, w));
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad->v[i] == 0.0);
  for (std::size_t i = 0; i < w.numel(); ++i) CHECK(w.grad->v[i] == frozen.at(i));
}

TEST_CASE("stop_gradient replay equivalence over a two-step chain") {
  // a chain with a boundary after step 1 must match a fresh forward seeded
  // with the recorded step-1 values, in values and in gradients
  Rng rng(17);
  auto w = random_tensor<double>({3, 3}, rng, 0.7, true);
  auto x0 = random_tensor<double>({1, 3}, rng);

  Tape<double> tape_a;
  Tensor<double> boundary_values;
  double loss_a = 0.0;
  {
    TapeScope<double> scope(tape_a);
    auto step1 = silu_mul(matmul(x0, w), matmul(x0, w));
    boundary_values = stop_gradient(step1).clone_values();
    auto step2 = silu_mul(matmul(stop_gradient(step1), w), matmul(stop_gradient(step1), w));
    auto loss = sum_all(step2);
    loss_a = loss.at(0);
    tape_a.backward(loss);
  }
  std::vector<double> grads_a = w.grad->v;

  w.zero_grad();
  Tape<double> tape_b;
  double loss_b = 0.0;
  {
    TapeScope<double> scope(tape_b);
    auto step2 = silu_mul(matmul(boundary_values, w), matmul(boundary_values, w));
    auto loss = sum_all(step2);
    loss_b = loss.at(0);
    tape_b.backward(loss);
  }
  CHECK(loss_a == loss_b);
  for (std::size_t i = 0; i < grads_a.size(); ++i) CHECK(grads_a[i] == w.grad->v[i]);
}

TEST_CASE("backward basics: sum and elementwise square") {
  Rng rng(19);
  auto x = random_tensor<double>({2, 4}, rng, 1.0, true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto loss = sum_all(x);
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad->v[i] == 1.0);

  x.zero_grad();
  Tape<double> tape2;
  {
    TapeScope<double> scope(tape2);
    auto loss = sum_all(mul(x, x));
    tape2.backward(loss);
  }
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(x.grad->v[i] == doctest::Approx(2.0 * x.at(i)).epsilon(1e-15));
}

TEST_CASE("backward rejects non-scalar losses and untracked tensors") {
  Rng rng(23);
  auto x = random_tensor<double>({2, 2}, rng, 1.0, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), usage_error);
  auto constant = Tensor<double>::zeros({1});
  CHECK_THROWS_AS(tape.backward(constant), usage_error);
}

TEST_CASE("untouched leaves keep zero gradients") {
  Rng rng(29);
  auto used = random_tensor<double>({2, 2}, rng, 1.0, true);
  auto unused = random_tensor<double>({2, 2}, rng, 1.0, true);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto loss = sum_all(mul(used, used));
    tape.backward(loss);
  }
  for (std::size_t i = 0; i < unused.numel(); ++i) CHECK(unused.grad->v[i] == 0.0);
}

TEST_CASE("tape determinism: identical passes give bit-identical gradients") {
  auto run = [](std::vector<float>& out_grads) {
    Rng rng(31);
    auto x = random_tensor<float>({3, 5}, rng, 1.0, true);
    auto w = random_tensor<float>({5, 4}, rng, 1.0, true);
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto gain = Tensor<float>::full({4}, 1.0f);
    auto loss = cross_entropy(rms_norm(matmul(x, w), gain, 1e-6), {0, 1, 2}, -1);
    tape.backward(loss);
    out_grads = w.grad->v;
    out_grads.insert(out_grads.end(), x.grad->v.begin(), x.grad->v.end());
  };
  std::vector<float> first, second;
  run(first);
  run(second);
  REQUIRE(first.size() == second.size());
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(first[i] == second[i]);
}

TEST_CASE("no tape means no recorded nodes") {
  Rng rng(37);
  auto x = random_tensor<float>({2, 3}, rng, 1.0, true);
  auto w = random_tensor<float>({3, 3}, rng, 1.0, true);
  {
    NoGradScope<float> ng;
    auto y = matmul(x, w);
    CHECK_FALSE(y.requires_grad);
    CHECK(y.grad == nullptr);
  }
}

TEST_CASE("every differentiable primitive matches finite differences") {
  for (const auto& c : rsm::testing::primitive_cases()) {
    CAPTURE(c.name);
    auto f64 = rsm::testing::run_op_case<double>(c, 1e-6, 1e-6);
    CHECK_MESSAGE(f64.worst.frob_rel < 1e-6, c.name, " f64 frob ", f64.worst.frob_rel);
    CHECK_MESSAGE(f64.worst.elem_pass_fraction >= 0.95, c.name, " f64 elem ",
                  f64.worst.elem_pass_fraction);
    auto f32 = rsm::testing::run_op_case<float>(c, 1e-3, 1e-3);
    CHECK_MESSAGE(f32.worst.frob_rel < 1e-3, c.name, " f32 frob ", f32.worst.frob_rel);
    CHECK_MESSAGE(f32.worst.elem_pass_fraction >= 0.95, c.name, " f32 elem ",
                  f32.worst.elem_pass_fraction);
  }
}
