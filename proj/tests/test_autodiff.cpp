// SPDX-License-Identifier: Apache-2.0
// Finite-difference checks for every tape operation (double precision).
#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "eqcollide/autodiff.hpp"
#include "eqcollide/nn.hpp"

using namespace eqcollide;
using namespace eqcollide::ad;
using D = double;

namespace {

Tensor<D> random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor<D> t(r, c);
  for (auto& x : t.data) x = u(rng);
  return t;
}

using Builder = std::function<Var(Tape<D>&, const std::vector<Var>&)>;

// Compares the tape gradient of sum(w .* f(inputs)) with central differences.
void check_gradient(const std::vector<Tensor<D>>& inputs, const Builder& f, double tol = 1e-6) {
  std::mt19937_64 rng(99);
  auto eval = [&](const std::vector<Tensor<D>>& ins, std::vector<Tensor<D>>* grads) {
    Tape<D> tape;
    std::vector<Var> vars;
    for (const auto& t : ins) vars.push_back(tape.input(t));
    Var out = f(tape, vars);
    // Fixed random projection makes the check sensitive to every output entry.
    std::mt19937_64 wrng(7);
    Tensor<D> w = random_tensor(wrng, tape.rows(out), tape.cols(out));
    Var loss = sum_all(tape, mul(tape, out, tape.constant(w)));
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (Var v : vars) grads->push_back(tape.grad(v).empty() ? Tensor<D>(tape.rows(v), tape.cols(v)) : tape.grad(v));
    }
    return tape.value(loss).data[0];
  };
  std::vector<Tensor<D>> grads;
  eval(inputs, &grads);
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k].data[i] += h;
      minus[k].data[i] -= h;
      const double fd = (eval(plus, nullptr) - eval(minus, nullptr)) / (2 * h);
      EXPECT_NEAR(grads[k].data[i], fd, tol * (1 + std::abs(fd))) << "input " << k << " entry " << i;
    }
}

}  // namespace

TEST(Autodiff, LinearAndMatmul) {
  std::mt19937_64 rng(1);
  check_gradient({random_tensor(rng, 4, 3), random_tensor(rng, 3, 5), random_tensor(rng, 1, 5)},
                 [](Tape<D>& t, const std::vector<Var>& v) { return linear(t, v[0], v[1], v[2]); });
  check_gradient({random_tensor(rng, 4, 3), random_tensor(rng, 3, 2)},
                 [](Tape<D>& t, const std::vector<Var>& v) { return matmul(t, v[0], v[1]); });
}

TEST(Autodiff, ElementwiseOps) {
  std::mt19937_64 rng(2);
  auto a = random_tensor(rng, 3, 4), b = random_tensor(rng, 3, 4);
  check_gradient({a, b}, [](Tape<D>& t, const std::vector<Var>& v) {
    Var x = mul(t, add(t, v[0], v[1]), sub(t, v[0], v[1]));
    x = add_scalar(t, scale(t, x, 0.7), 0.1);
    return concat_cols(t, {silu(t, x), sin(t, x), cos(t, x), square(t, x), relu(t, add_scalar(t, x, 0.05))});
  });
}

TEST(Autodiff, BroadcastAndSlices) {
  std::mt19937_64 rng(3);
  check_gradient({random_tensor(rng, 5, 4), random_tensor(rng, 5, 1), random_tensor(rng, 1, 4)},
                 [](Tape<D>& t, const std::vector<Var>& v) {
                   Var x = add_row(t, mul_col(t, v[0], v[1]), v[2]);
                   return concat_cols(t, {slice_cols(t, x, 1, 2), row_sum(t, x)});
                 });
}

TEST(Autodiff, GatherScatterGroups) {
  std::mt19937_64 rng(4);
  check_gradient({random_tensor(rng, 4, 3)}, [](Tape<D>& t, const std::vector<Var>& v) {
    Var g = gather_rows(t, v[0], {3, 0, 0, 2, 1, 3});
    Var s = scatter_add_rows(t, g, {1, 1, 0, 2, 0, 1}, 3);
    Var m = group_max(t, g, 2);
    Var gs = group_sum(t, g, 2);
    Var sm = group_softmax(t, g, 3);
    return concat_cols(t, {s, m, group_sum(t, sm, 2), gs});
  });
}

TEST(Autodiff, HeadsAndNorm) {
  std::mt19937_64 rng(5);
  check_gradient({random_tensor(rng, 3, 6), random_tensor(rng, 3, 6), random_tensor(rng, 1, 6),
                  random_tensor(rng, 1, 6)},
                 [](Tape<D>& t, const std::vector<Var>& v) {
                   Var d = rowdot_heads(t, v[0], v[1], 2);
                   Var h = mul_heads(t, v[0], d);
                   return layer_norm(t, h, v[2], v[3]);
                 });
}

TEST(Autodiff, RotationWrapPolynomial) {
  std::mt19937_64 rng(6);
  check_gradient({random_tensor(rng, 4, 2), random_tensor(rng, 4, 1, 3.0)},
                 [](Tape<D>& t, const std::vector<Var>& v) {
                   Var r = rotate_rows(t, v[0], v[1], -1.0);
                   Var p = polynomial_features(t, r, 3);
                   return concat_cols(t, {p, wrap_angle(t, scale(t, v[1], 2.0)), rotate_rows(t, r, v[1])});
                 });
}

TEST(Autodiff, ParameterGradientsAccumulate) {
  nn::ParamStore<D> store;
  auto& p = store.create("w", Tensor<D>(1, 2, std::vector<D>{1.0, 2.0}));
  Tape<D> tape;
  Var w = tape.parameter(p);
  EXPECT_EQ(tape.parameter(p).id, w.id);
  Var loss = sum_all(tape, mul(tape, w, w));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(p.grad.data[0], 2.0);
  EXPECT_DOUBLE_EQ(p.grad.data[1], 4.0);
}

TEST(Autodiff, NonRecordingTapeSkipsGradients) {
  Tape<D> tape(false);
  Var x = tape.input(Tensor<D>(1, 1, 3.0));
  Var y = square(tape, x);
  EXPECT_FALSE(tape.needs_grad(y));
  EXPECT_DOUBLE_EQ(tape.value(y).data[0], 9.0);
}

TEST(Optim, AdamMovesAgainstGradientAndClipBounds) {
  nn::ParamStore<D> store;
  auto& p = store.create("w", Tensor<D>(1, 2, std::vector<D>{1.0, -1.0}));
  p.grad.data = {3.0, -4.0};
  EXPECT_NEAR(nn::clip_grad_norm(store, 1.0), 5.0, 1e-12);
  EXPECT_NEAR(store.grad_norm(), 1.0, 1e-9);
  nn::adam_step(store, 0.1, 1);
  EXPECT_NEAR(p.value.data[0], 0.9, 1e-6);
  EXPECT_NEAR(p.value.data[1], -0.9, 1e-6);
  EXPECT_DOUBLE_EQ(nn::cosine_lr(1e-3, 0, 10), 1e-3);
  EXPECT_NEAR(nn::cosine_lr(1e-3, 5, 10), 5e-4, 1e-15);
  EXPECT_NEAR(nn::cosine_lr(1e-3, 10, 10), 0.0, 1e-18);
}
