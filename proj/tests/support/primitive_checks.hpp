#pragma once

// Shared gradient-check registry: every differentiable primitive (and the
// block-level compositions) paired with a small input configuration. The
// finite-difference reference always runs through the double instantiation;
// the tape under test runs at the requested precision.

#include <functional>
#include <string>
#include <vector>

#include "rsm/ops.hpp"
#include "support/gradcheck.hpp"

namespace rsm::testing {

template <typename Real>
using OpBuilder = std::function<Tensor<Real>(std::vector<Tensor<Real>>&)>;

struct OpCase {
  std::string name;
  std::vector<Shape> input_shapes;
  double scale = 1.0;
  OpBuilder<double> build_f64;
  OpBuilder<float> build_f32;
};

// Convenience: one generic callable instantiated at both precisions.
template <typename Fn>
OpCase make_case(std::string name, std::vector<Shape> shapes, Fn fn, double scale = 1.0) {
  OpCase c;
  c.name = std::move(name);
  c.input_shapes = std::move(shapes);
  c.scale = scale;
  c.build_f64 = [fn](std::vector<Tensor<double>>& in) { return fn(in); };
  c.build_f32 = [fn](std::vector<Tensor<float>>& in) { return fn(in); };
  return c;
}

inline std::vector<OpCase> primitive_cases() {
  std::vector<OpCase> cases;
  cases.push_back(make_case(
      "add", {{2, 3}, {2, 3}},
      [](auto& in) { return add(in[0], in[1]); }));
  cases.push_back(make_case(
      "sub", {{2, 3}, {2, 3}},
      [](auto& in) { return sub(in[0], in[1]); }));
  cases.push_back(make_case(
      "mul", {{2, 3}, {2, 3}},
      [](auto& in) { return mul(in[0], in[1]); }));
  cases.push_back(make_case(
      "scale", {{2, 5}},
      [](auto& in) {
        using Real = typename std::decay_t<decltype(in[0])>::value_type;
        return scale(in[0], Real(1.7));
      }));
  cases.push_back(make_case(
      "matmul", {{3, 4}, {4, 2}},
      [](auto& in) { return matmul(in[0], in[1]); }));
  cases.push_back(make_case(
      "matmul_batched", {{2, 3, 4}, {4, 2}},
      [](auto& in) { return matmul(in[0], in[1]); }));
  cases.push_back(make_case(
      "matmul_nt", {{2, 3, 4}, {5, 4}},
      [](auto& in) { return matmul_nt(in[0], in[1]); }));
  cases.push_back(make_case(
      "gather_rows", {{6, 3}},
      [](auto& in) { return gather_rows(in[0], {4, 0, 4, 2}); }));
  cases.push_back(make_case(
      "concat_seq", {{2, 2, 3}, {2, 4, 3}},
      [](auto& in) { return concat_seq(in[0], in[1]); }));
  cases.push_back(make_case(
      "slice_seq", {{2, 5, 3}},
      [](auto& in) { return slice_seq(in[0], 1, 3); }));
  cases.push_back(make_case(
      "slice_last", {{2, 3, 6}},
      [](auto& in) { return slice_last(in[0], 2, 3); }));
  cases.push_back(make_case(
      "broadcast_add_seq", {{2, 4, 3}, {4, 3}},
      [](auto& in) { return broadcast_add_seq(in[0], in[1]); }));
  cases.push_back(make_case(
      "transpose_12", {{2, 4, 3}},
      [](auto& in) { return transpose_12(in[0]); }));
  cases.push_back(make_case(
      "heads_split", {{2, 3, 8}},
      [](auto& in) { return heads_split(in[0], 2); }));
  cases.push_back(make_case(
      "heads_merge", {{4, 3, 4}},
      [](auto& in) { return heads_merge(in[0], 2); }));
  cases.push_back(make_case(
      "rope_apply", {{2, 4, 6}},
      [](auto& in) {
        using T = std::decay_t<decltype(in[0])>;
        using Real = typename T::value_type;
        auto tables = rope_tables<Real>(4, 6, 10000.0);
        return rope_apply(in[0], tables.first, tables.second);
      }));
  cases.push_back(make_case(
      "attn_core", {{2, 3, 4}, {2, 3, 4}, {2, 3, 4}},
      [](auto& in) { return attn_core(in[0], in[1], in[2]); }));
  cases.push_back(make_case(
      "rms_norm", {{2, 3, 5}, {5}},
      [](auto& in) { return rms_norm(in[0], in[1], 1e-6); }));
  cases.push_back(make_case(
      "silu_mul", {{2, 6}, {2, 6}},
      [](auto& in) { return silu_mul(in[0], in[1]); }));
  cases.push_back(make_case(
      "swiglu_ffn", {{2, 3, 4}, {4, 8}, {4, 8}, {8, 4}},
      [](auto& in) { return swiglu_ffn(in[0], in[1], in[2], in[3]); }, 0.5));
  cases.push_back(make_case(
      "token_mix_ffn", {{1, 5, 3}, {5, 8}, {5, 8}, {8, 5}},
      [](auto& in) { return token_mix_ffn(in[0], in[1], in[2], in[3]); }, 0.5));
  cases.push_back(make_case(
      "attention", {{1, 3, 4}, {4, 12}, {4, 4}},
      [](auto& in) { return attention(in[0], in[1], in[2], 2); }, 0.5));
  cases.push_back(make_case(
      "attention_rope", {{1, 3, 4}, {4, 12}, {4, 4}},
      [](auto& in) {
        using T = std::decay_t<decltype(in[0])>;
        using Real = typename T::value_type;
        auto tables = rope_tables<Real>(3, 2, 10000.0);
        return attention(in[0], in[1], in[2], 2, &tables.first, &tables.second);
      },
      0.5));
  cases.push_back(make_case(
      "cross_entropy", {{2, 3, 5}},
      [](auto& in) { return cross_entropy(in[0], {0, 4, 2, 1, 3, 0}, -1); }));
  cases.push_back(make_case(
      "sum_all", {{3, 4}},
      [](auto& in) { return sum_all(in[0]); }));
  return cases;
}

struct OpCheckResult {
  std::string name;
  GradCompare worst;  // across all inputs of the case
};

// Runs one case at precision Real against the double finite-difference
// reference. The loss is a fixed random weighting of the output so every
// output entry contributes.
template <typename Real>
OpCheckResult run_op_case(const OpCase& c, double fd_step, double tol,
                          std::uint64_t seed = 1234) {
  Rng rng(mix64(seed, std::hash<std::string>{}(c.name)));
  std::vector<Tensor<double>> master;
  master.reserve(c.input_shapes.size());
  for (const Shape& s : c.input_shapes)
    master.push_back(random_tensor<double>(s, rng, c.scale, false));

  // probe output shape, then fix the loss weighting
  Tensor<double> probe;
  {
    NoGradScope<double> ng;
    std::vector<Tensor<double>> tmp;
    for (auto& m : master) tmp.push_back(m.clone_values());
    probe = c.build_f64(tmp);
  }
  Tensor<double> w = random_tensor<double>(probe.shape, rng, 1.0, false);

  const bool scalar_out = probe.numel() == 1;

  // analytic gradients at the precision under test
  std::vector<Tensor<Real>> inputs;
  for (auto& m : master) {
    Tensor<Real> t = m.template cast<Real>();
    t.ensure_grad();
    inputs.push_back(t);
  }
  Tape<Real> tape;
  {
    TapeScope<Real> scope(tape);
    Tensor<Real> out;
    if constexpr (std::is_same_v<Real, double>)
      out = c.build_f64(inputs);
    else
      out = c.build_f32(inputs);
    Tensor<Real> loss = scalar_out ? out : sum_all(mul(out, w.template cast<Real>()));
    tape.backward(loss);
  }

  // double finite-difference reference per input
  OpCheckResult result{c.name, {}};
  auto loss_fn = [&]() {
    NoGradScope<double> ng;
    std::vector<Tensor<double>> tmp;
    for (auto& m : master) tmp.push_back(m.clone_values());
    Tensor<double> out = c.build_f64(tmp);
    if (scalar_out) return out.at(0);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) acc += out.at(i) * w.at(i);
    return acc;
  };
  for (std::size_t i = 0; i < master.size(); ++i) {
    std::vector<double> ref = fd_gradient(loss_fn, master[i], fd_step);
    GradCompare cmp =
        compare_gradients(ref, inputs[i].grad->v.data(), inputs[i].numel(), tol);
    if (cmp.frob_rel > result.worst.frob_rel) result.worst.frob_rel = cmp.frob_rel;
    result.worst.elem_pass_fraction =
        std::min(result.worst.elem_pass_fraction, cmp.elem_pass_fraction);
  }
  return result;
}

}  // namespace rsm::testing
