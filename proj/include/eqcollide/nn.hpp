// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "eqcollide/autodiff.hpp"

namespace eqcollide::nn {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Named parameters. std::map keeps addresses stable and iteration ordered,
/// which fixes the order of every reduction over parameters.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter<T>& create(const std::string& name, Tensor<T> init) {
    require(!params_.contains(name), "ParamStore: duplicate parameter " + name);
    auto [it, ok] = params_.emplace(name, Parameter<T>(name, std::move(init)));
    return it->second;
  }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    require(it != params_.end(), "ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), "ParamStore: unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.contains(name); }

  std::map<std::string, Parameter<T>>& all() { return params_; }
  const std::map<std::string, Parameter<T>>& all() const { return params_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  /// Euclidean norm of all gradients whose name starts with `prefix`.
  double grad_norm(const std::string& prefix = "") const {
    double s = 0;
    for (const auto& [name, p] : params_) {
      if (name.rfind(prefix, 0) != 0) continue;
      for (T g : p.grad.data) s += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(s);
  }

 private:
  std::map<std::string, Parameter<T>> params_;
};

/// Deterministic initializer. Draws in double so float and double models
/// built from one seed start from the same values.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <class T>
  Tensor<T> uniform(std::size_t rows, std::size_t cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(rows, cols);
    for (T& x : t.data) x = static_cast<T>(dist(rng_));
    return t;
  }

  template <class T>
  Tensor<T> normal(std::size_t rows, std::size_t cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<T> t(rows, cols);
    for (T& x : t.data) x = static_cast<T>(dist(rng_));
    return t;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

template <class T>
struct Linear {
  Parameter<T>* weight = nullptr;  // in x out
  Parameter<T>* bias = nullptr;    // 1 x out

  Linear() = default;
  Linear(ParamStore<T>& store, Initializer& init, const std::string& name, std::size_t in, std::size_t out,
         double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(in));
    weight = &store.create(name + ".weight", init.uniform<T>(in, out, bound));
    bias = &store.create(name + ".bias", Tensor<T>(1, out));
  }

  std::size_t in() const { return weight->value.rows; }
  std::size_t out() const { return weight->value.cols; }

  Var operator()(Tape<T>& tape, Var x) const {
    return ad::linear(tape, x, tape.parameter(*weight), tape.parameter(*bias));
  }
};

enum class Activation { relu, silu };

template <class T>
Var activate(Tape<T>& tape, Var x, Activation a) {
  return a == Activation::relu ? ad::relu(tape, x) : ad::silu(tape, x);
}

/// Stack of Linear layers with an activation after every hidden layer, and
/// after the last one when `activate_last` is set.
template <class T>
struct Mlp {
  std::vector<Linear<T>> layers;
  Activation act = Activation::silu;
  bool activate_last = false;

  Mlp() = default;
  Mlp(ParamStore<T>& store, Initializer& init, const std::string& name, std::size_t in,
      const std::vector<std::size_t>& widths, Activation a, bool act_last, double last_gain = 1.0)
      : act(a), activate_last(act_last) {
    std::size_t prev = in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const double gain = i + 1 == widths.size() ? last_gain : 1.0;
      layers.emplace_back(store, init, name + "." + std::to_string(i), prev, widths[i], gain);
      prev = widths[i];
    }
  }

  std::size_t out() const { return layers.back().out(); }

  Var operator()(Tape<T>& tape, Var x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](tape, x);
      if (i + 1 < layers.size() || activate_last) x = activate(tape, x, act);
    }
    return x;
  }
};

template <class T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t width) {
    gain = &store.create(name + ".gain", Tensor<T>(1, width, T(1)));
    bias = &store.create(name + ".bias", Tensor<T>(1, width));
  }
  Var operator()(Tape<T>& tape, Var x) const {
    return ad::layer_norm(tape, x, tape.parameter(*gain), tape.parameter(*bias));
  }
};

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update; `step` counts from 1.
template <class T>
void adam_step(ParamStore<T>& store, double lr, std::uint64_t step, const AdamConfig& cfg = {}) {
  require(step >= 1, "adam_step: step counts from 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (auto& [_, p] : store.all()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad.data[i]);
      const double m = cfg.beta1 * static_cast<double>(p.adam_m.data[i]) + (1 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(p.adam_v.data[i]) + (1 - cfg.beta2) * g * g;
      p.adam_m.data[i] = static_cast<T>(m);
      p.adam_v.data[i] = static_cast<T>(v);
      const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      p.value.data[i] = static_cast<T>(static_cast<double>(p.value.data[i]) - update);
    }
  }
}

/// Rescales all gradients so their global norm is at most max_norm. Returns
/// the norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  const double total = store.grad_norm();
  if (max_norm > 0 && total > max_norm) {
    const T s = static_cast<T>(max_norm / (total + 1e-12));
    for (auto& [_, p] : store.all())
      for (T& g : p.grad.data) g *= s;
  }
  return total;
}

/// Cosine decay from base_lr to zero over total_steps.
inline double cosine_lr(double base_lr, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace eqcollide::nn
