// SPDX-License-Identifier: Apache-2.0
// Helpers shared by the test binaries.
#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "eqcollide/autodiff.hpp"
#include "eqcollide/model_config.hpp"
#include "eqcollide/trajectory.hpp"

namespace testing_support {

using namespace eqcollide;

template <class T = double>
ad::Tensor<T> random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  ad::Tensor<T> t(r, c);
  for (auto& x : t.data) x = static_cast<T>(u(rng));
  return t;
}

/// Objects as filled disks with a shared random drift plus per-point jitter
/// in velocity. Object k is centered near `centers[k]`.
template <class T>
PointCloud<T> blob_cloud(std::mt19937_64& rng, const std::vector<Vec2<double>>& centers, std::size_t per_object,
                         double radius = 0.08, double speed = 0.5) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PointCloud<T> c;
  for (Index k = 0; k < centers.size(); ++k) {
    const Vec2<double> drift{u(rng) * speed, u(rng) * speed};
    const double spin = u(rng) * 3.0;
    for (std::size_t i = 0; i < per_object; ++i) {
      double x, y;
      do {
        x = u(rng);
        y = u(rng);
      } while (x * x + y * y > 1);
      const Vec2<double> p{centers[k].x + radius * x, centers[k].y + radius * y};
      const Vec2<double> v{drift.x - spin * radius * y + 0.05 * u(rng), drift.y + spin * radius * x + 0.05 * u(rng)};
      c.positions.emplace_back(static_cast<T>(p.x), static_cast<T>(p.y));
      c.velocities.emplace_back(static_cast<T>(v.x), static_cast<T>(v.y));
      c.object_ids.push_back(k);
    }
  }
  return c;
}

template <class T>
GroupElement<T> random_group_element(std::mt19937_64& rng, bool rotations) {
  std::uniform_real_distribution<double> a(-std::numbers::pi, std::numbers::pi), t(-0.3, 0.3);
  return GroupElement<T>{rotations ? static_cast<T>(a(rng)) : T(0),
                         Vec2<T>{static_cast<T>(t(rng)), static_cast<T>(t(rng))}};
}

/// |a - b| / (|a| + |b| + 1e-12) over flattened point lists.
template <class T>
double relative_deviation(const std::vector<Vec2<T>>& a, const std::vector<Vec2<T>>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = static_cast<double>(a[i].x) - b[i].x, dy = static_cast<double>(a[i].y) - b[i].y;
    d += dx * dx + dy * dy;
    na += static_cast<double>(a[i].x) * a[i].x + static_cast<double>(a[i].y) * a[i].y;
    nb += static_cast<double>(b[i].x) * b[i].x + static_cast<double>(b[i].y) * b[i].y;
  }
  return std::sqrt(d) / (std::sqrt(na) + std::sqrt(nb) + 1e-12);
}

template <class T>
double max_abs_diff(const ad::Tensor<T>& a, const ad::Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

/// Small architecture for gradient checks and fast tests.
inline ModelConfig micro_config(GroupVariant g = GroupVariant::se2) {
  ModelConfig c;
  c.group = g;
  c.init_seed = 11;
  c.encoder.mlp_widths = {{8, 8}, {8, 8}};
  c.encoder.samples = {16, 4};
  c.encoder.radii = {0.04, 0.1};
  c.encoder.max_neighbors = {8, 8};
  c.decoder.heads = 2;
  c.decoder.hidden = 8;
  c.decoder.query_rff_features = 4;
  c.decoder.value_rff_features = 4;
  c.decoder.context_width = 8;
  c.processor.hidden = 8;
  c.processor.layers = 2;
  c.processor.basis_dim = 8;
  return c;
}

/// Medium architecture used by equivariance tests.
inline ModelConfig small_config(GroupVariant g = GroupVariant::se2) {
  ModelConfig c;
  c.group = g;
  c.init_seed = 5;
  c.encoder.mlp_widths = {{16, 16}, {16, 32}, {32, 16}};
  c.encoder.samples = {64, 24, 8};
  c.encoder.radii = {0.025, 0.05, 0.1};
  c.encoder.max_neighbors = {12, 16, 16};
  c.decoder.hidden = 16;
  c.decoder.query_rff_features = 8;
  c.decoder.value_rff_features = 8;
  c.decoder.context_width = 16;
  c.processor.hidden = 16;
  c.processor.basis_dim = 16;
  return c;
}

using Builder = std::function<ad::Var(ad::Tape<double>&, const std::vector<ad::Var>&)>;

/// Compares the tape gradient of sum(w .* f(inputs)) with central differences.
inline void check_gradient(const std::vector<ad::Tensor<double>>& inputs, const Builder& f, double tol = 1e-6,
                           double h = 1e-6) {
  using ad::Tape;
  using ad::Tensor;
  using ad::Var;
  auto eval = [&](const std::vector<Tensor<double>>& ins, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& t : ins) vars.push_back(tape.input(t));
    Var out = f(tape, vars);
    std::mt19937_64 wrng(7);
    Tensor<double> w = random_tensor(wrng, tape.rows(out), tape.cols(out));
    Var loss = ad::sum_all(tape, ad::mul(tape, out, tape.constant(w)));
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (Var v : vars)
        grads->push_back(tape.grad(v).empty() ? Tensor<double>(tape.rows(v), tape.cols(v)) : tape.grad(v));
    }
    return tape.value(loss).data[0];
  };
  std::vector<Tensor<double>> grads;
  eval(inputs, &grads);
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k].data[i] += h;
      minus[k].data[i] -= h;
      const double fd = (eval(plus, nullptr) - eval(minus, nullptr)) / (2 * h);
      EXPECT_NEAR(grads[k].data[i], fd, tol * (1 + std::abs(fd))) << "input " << k << " entry " << i;
    }
}

}  // namespace testing_support
