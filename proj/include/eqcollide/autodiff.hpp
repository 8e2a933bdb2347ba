// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation applied to its Vars. Values are owned by
// the tape and live until clear(); backward() walks the record in reverse
// and accumulates gradients into nodes and into the bound Parameters.
#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "eqcollide/error.hpp"

namespace eqcollide::ad {

template <class T>
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
    require(data.size() == r * c, "Tensor: data size does not match shape");
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  T* row(std::size_t r) { return data.data() + r * cols; }
  const T* row(std::size_t r) const { return data.data() + r * cols; }
};

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class T>
MatMap<T> mat(Tensor<T>& t) {
  return MatMap<T>(t.data.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
}
template <class T>
ConstMatMap<T> mat(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data.data(), static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
}

/// Trainable tensor with its gradient and optimizer moments.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> adam_m;
  Tensor<T> adam_v;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) { reset_state(); }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
  void reset_state() {
    grad = Tensor<T>(value.rows, value.cols);
    adam_m = Tensor<T>(value.rows, value.cols);
    adam_v = Tensor<T>(value.rows, value.cols);
  }
};

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  /// Differentiable input not bound to a Parameter (tests, sensitivities).
  Var input(Tensor<T> value) { return push(std::move(value), recording_, {}); }

  Var parameter(Parameter<T>& p) {
    if (auto it = param_vars_.find(&p); it != param_vars_.end()) return it->second;
    Var v = push(p.value, recording_, {});
    nodes_[v.id].param = &p;
    param_vars_.emplace(&p, v);
    return v;
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t rows(Var v) const { return value(v).rows; }
  std::size_t cols(Var v) const { return value(v).cols; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient buffer of v, allocated on first use. Null if v is not
  /// differentiable.
  Tensor<T>* grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.rows, n.value.cols);
    if (n.grad.rows != n.value.rows) n.grad = Tensor<T>(n.value.rows, n.value.cols);
    return &n.grad;
  }
  const Tensor<T>& grad(Var v) const { return nodes_.at(v.id).grad; }

  /// Records an operation result. `fn` runs during backward with the output
  /// gradient available through grad(out).
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, std::function<void()> fn) {
    bool ng = false;
    if (recording_)
      for (Var in : inputs) ng = ng || nodes_[in.id].needs_grad;
    return push(std::move(value), ng, ng ? std::move(fn) : std::function<void()>{});
  }
  Var record(Tensor<T> value, const std::vector<Var>& inputs, std::function<void()> fn) {
    bool ng = false;
    if (recording_)
      for (Var in : inputs) ng = ng || nodes_[in.id].needs_grad;
    return push(std::move(value), ng, ng ? std::move(fn) : std::function<void()>{});
  }

  /// Seeds d(loss)/d(loss) = 1 (or the given seed) and propagates.
  void backward(Var loss, const Tensor<T>* seed = nullptr) {
    Tensor<T>* g = grad_buffer(loss);
    if (g == nullptr) return;
    if (seed != nullptr) {
      require(seed->rows == g->rows && seed->cols == g->cols, "backward: seed shape mismatch");
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += seed->data[i];
    } else {
      require(g->size() == 1, "backward: loss must be a scalar");
      g->data[0] += T(1);
    }
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward();
      if (n.param != nullptr) {
        auto& pg = n.param->grad.data;
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad.data[k];
      }
    }
  }

  void clear() {
    nodes_.clear();
    param_vars_.clear();
  }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void()> backward;
    Parameter<T>* param = nullptr;
  };

  Var push(Tensor<T> value, bool needs_grad, std::function<void()> fn) {
    nodes_.push_back(Node{std::move(value), {}, needs_grad, std::move(fn), nullptr});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool recording_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Var> param_vars_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw ValidationError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                          std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                          std::to_string(b.cols) + ")");
}

template <class T, class F>
Var unary(Tape<T>& tape, Var a, F&& f_and_df) {
  const Tensor<T>& av = tape.value(a);
  Tensor<T> out(av.rows, av.cols);
  Tensor<T> deriv(av.rows, av.cols);
  for (std::size_t i = 0; i < av.size(); ++i) {
    auto [y, dy] = f_and_df(av.data[i]);
    out.data[i] = y;
    deriv.data[i] = dy;
  }
  Var o = Var{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a}, [&tape, a, o, d = std::move(deriv)] {
    const Tensor<T>& go = tape.grad(o);
    Tensor<T>* ga = tape.grad_buffer(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga->data[i] += go.data[i] * d.data[i];
  });
}
}  // namespace detail

/// a (n x k) * b (k x m)
template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.cols != bv.rows) throw ValidationError("matmul: inner dimensions differ");
  Tensor<T> out(av.rows, bv.cols);
  mat(out).noalias() = mat(av) * mat(bv);
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a, b}, [&tape, a, b, o] {
    const Tensor<T>& go = tape.grad(o);
    if (Tensor<T>* ga = tape.grad_buffer(a)) mat(*ga).noalias() += mat(go) * mat(tape.value(b)).transpose();
    if (Tensor<T>* gb = tape.grad_buffer(b)) mat(*gb).noalias() += mat(tape.value(a)).transpose() * mat(go);
  });
}

/// x (n x k) * w (k x m) + bias (1 x m)
template <class T>
Var linear(Tape<T>& tape, Var x, Var w, Var bias) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(w);
  const Tensor<T>& bv = tape.value(bias);
  if (xv.cols != wv.rows) throw ValidationError("linear: input width does not match weight rows");
  if (bv.rows != 1 || bv.cols != wv.cols) throw ValidationError("linear: bias shape mismatch");
  Tensor<T> out(xv.rows, wv.cols);
  mat(out).noalias() = mat(xv) * mat(wv);
  mat(out).rowwise() += mat(bv).row(0);
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {x, w, bias}, [&tape, x, w, bias, o] {
    const Tensor<T>& go = tape.grad(o);
    if (Tensor<T>* gx = tape.grad_buffer(x)) mat(*gx).noalias() += mat(go) * mat(tape.value(w)).transpose();
    if (Tensor<T>* gw = tape.grad_buffer(w)) mat(*gw).noalias() += mat(tape.value(x)).transpose() * mat(go);
    if (Tensor<T>* gb = tape.grad_buffer(bias)) mat(*gb).row(0) += mat(go).colwise().sum();
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  detail::check_same_shape(tape.value(a), tape.value(b), "add");
  Tensor<T> out = tape.value(a);
  const auto& bv = tape.value(b).data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a, b}, [&tape, a, b, o] {
    const Tensor<T>& go = tape.grad(o);
    for (Var v : {a, b})
      if (Tensor<T>* g = tape.grad_buffer(v))
        for (std::size_t i = 0; i < go.size(); ++i) g->data[i] += go.data[i];
  });
}

template <class T>
Var sub(Tape<T>& tape, Var a, Var b) {
  detail::check_same_shape(tape.value(a), tape.value(b), "sub");
  Tensor<T> out = tape.value(a);
  const auto& bv = tape.value(b).data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv[i];
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a, b}, [&tape, a, b, o] {
    const Tensor<T>& go = tape.grad(o);
    if (Tensor<T>* g = tape.grad_buffer(a))
      for (std::size_t i = 0; i < go.size(); ++i) g->data[i] += go.data[i];
    if (Tensor<T>* g = tape.grad_buffer(b))
      for (std::size_t i = 0; i < go.size(); ++i) g->data[i] -= go.data[i];
  });
}

/// Elementwise product.
template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  detail::check_same_shape(tape.value(a), tape.value(b), "mul");
  Tensor<T> out = tape.value(a);
  const auto& bv = tape.value(b).data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a, b}, [&tape, a, b, o] {
    const Tensor<T>& go = tape.grad(o);
    const auto& av = tape.value(a).data;
    const auto& bv = tape.value(b).data;
    if (Tensor<T>* g = tape.grad_buffer(a))
      for (std::size_t i = 0; i < go.size(); ++i) g->data[i] += go.data[i] * bv[i];
    if (Tensor<T>* g = tape.grad_buffer(b))
      for (std::size_t i = 0; i < go.size(); ++i) g->data[i] += go.data[i] * av[i];
  });
}

/// a (n x m) * col (n x 1), broadcasting col across columns.
template <class T>
Var mul_col(Tape<T>& tape, Var a, Var col) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& cv = tape.value(col);
  if (cv.rows != av.rows || cv.cols != 1) throw ValidationError("mul_col: column shape mismatch");
  Tensor<T> out = av;
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out(r, c) *= cv.data[r];
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a, col}, [&tape, a, col, o] {
    const Tensor<T>& go = tape.grad(o);
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& cv = tape.value(col);
    if (Tensor<T>* g = tape.grad_buffer(a))
      for (std::size_t r = 0; r < av.rows; ++r)
        for (std::size_t c = 0; c < av.cols; ++c) (*g)(r, c) += go(r, c) * cv.data[r];
    if (Tensor<T>* g = tape.grad_buffer(col))
      for (std::size_t r = 0; r < av.rows; ++r) {
        T s = 0;
        for (std::size_t c = 0; c < av.cols; ++c) s += go(r, c) * av(r, c);
        g->data[r] += s;
      }
  });
}

/// a (n x m) + row (1 x m), broadcasting row down the rows.
template <class T>
Var add_row(Tape<T>& tape, Var a, Var row) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& rv = tape.value(row);
  if (rv.rows != 1 || rv.cols != av.cols) throw ValidationError("add_row: row shape mismatch");
  Tensor<T> out = av;
  mat(out).rowwise() += mat(rv).row(0);
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a, row}, [&tape, a, row, o] {
    const Tensor<T>& go = tape.grad(o);
    if (Tensor<T>* g = tape.grad_buffer(a)) mat(*g) += mat(go);
    if (Tensor<T>* g = tape.grad_buffer(row)) mat(*g).row(0) += mat(go).colwise().sum();
  });
}

template <class T>
Var scale(Tape<T>& tape, Var a, T s) {
  return detail::unary(tape, a, [s](T x) { return std::pair<T, T>{x * s, s}; });
}

template <class T>
Var add_scalar(Tape<T>& tape, Var a, T s) {
  return detail::unary(tape, a, [s](T x) { return std::pair<T, T>{x + s, T(1)}; });
}

template <class T>
Var relu(Tape<T>& tape, Var a) {
  return detail::unary(tape, a, [](T x) { return x > 0 ? std::pair<T, T>{x, T(1)} : std::pair<T, T>{T(0), T(0)}; });
}

/// x * sigmoid(x)
template <class T>
Var silu(Tape<T>& tape, Var a) {
  return detail::unary(tape, a, [](T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return std::pair<T, T>{x * s, s * (T(1) + x * (T(1) - s))};
  });
}

template <class T>
Var sin(Tape<T>& tape, Var a) {
  return detail::unary(tape, a, [](T x) { return std::pair<T, T>{std::sin(x), std::cos(x)}; });
}

template <class T>
Var cos(Tape<T>& tape, Var a) {
  return detail::unary(tape, a, [](T x) { return std::pair<T, T>{std::cos(x), -std::sin(x)}; });
}

template <class T>
Var square(Tape<T>& tape, Var a) {
  return detail::unary(tape, a, [](T x) { return std::pair<T, T>{x * x, 2 * x}; });
}

/// Wraps to (-pi, pi]; unit derivative.
template <class T>
Var wrap_angle(Tape<T>& tape, Var a) {
  return detail::unary(tape, a, [](T x) {
    constexpr T pi = std::numbers::pi_v<T>;
    T r = x;
    if (!(r > -pi && r <= pi)) {
      r = std::fmod(x + pi, 2 * pi);
      if (r < 0) r += 2 * pi;
      r -= pi;
      if (r <= -pi) r = pi;
    }
    return std::pair<T, T>{r, T(1)};
  });
}

template <class T>
Var sum_all(Tape<T>& tape, Var a) {
  T s = 0;
  for (T x : tape.value(a).data) s += x;
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(Tensor<T>(1, 1, s), {a}, [&tape, a, o] {
    const T go = tape.grad(o).data[0];
    Tensor<T>* g = tape.grad_buffer(a);
    for (T& x : g->data) x += go;
  });
}

template <class T>
Var mean_all(Tape<T>& tape, Var a) {
  const std::size_t n = tape.value(a).size();
  require(n > 0, "mean_all: empty tensor");
  return scale(tape, sum_all(tape, a), T(1) / static_cast<T>(n));
}

/// Sum over columns: (n x m) -> (n x 1).
template <class T>
Var row_sum(Tape<T>& tape, Var a) {
  const Tensor<T>& av = tape.value(a);
  Tensor<T> out(av.rows, 1);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out.data[r] += av(r, c);
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a}, [&tape, a, o] {
    const Tensor<T>& go = tape.grad(o);
    Tensor<T>* g = tape.grad_buffer(a);
    for (std::size_t r = 0; r < g->rows; ++r)
      for (std::size_t c = 0; c < g->cols; ++c) (*g)(r, c) += go.data[r];
  });
}

template <class T>
Var concat_cols(Tape<T>& tape, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = tape.value(parts[0]).rows;
  std::size_t cols = 0;
  for (Var p : parts) {
    require(tape.value(p).rows == rows, "concat_cols: row count mismatch");
    cols += tape.value(p).cols;
  }
  Tensor<T> out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor<T>& pv = tape.value(p);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(pv.row(r), pv.row(r) + pv.cols, out.row(r) + off);
    off += pv.cols;
  }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), parts, [&tape, parts, o] {
    const Tensor<T>& go = tape.grad(o);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t pc = tape.value(p).cols;
      if (Tensor<T>* g = tape.grad_buffer(p))
        for (std::size_t r = 0; r < g->rows; ++r)
          for (std::size_t c = 0; c < pc; ++c) (*g)(r, c) += go(r, off + c);
      off += pc;
    }
  });
}

/// Stacks row blocks with equal widths.
template <class T>
Var concat_rows(Tape<T>& tape, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = tape.value(parts[0]).cols;
  std::size_t rows = 0;
  for (Var p : parts) {
    require(tape.value(p).cols == cols, "concat_rows: column count mismatch");
    rows += tape.value(p).rows;
  }
  Tensor<T> out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor<T>& pv = tape.value(p);
    std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off * cols));
    off += pv.rows;
  }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), parts, [&tape, parts, o, cols] {
    const Tensor<T>& go = tape.grad(o);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t pr = tape.value(p).rows;
      if (Tensor<T>* g = tape.grad_buffer(p))
        for (std::size_t i = 0; i < pr * cols; ++i) g->data[i] += go.data[off * cols + i];
      off += pr;
    }
  });
}

template <class T>
Var slice_cols(Tape<T>& tape, Var a, std::size_t begin, std::size_t count) {
  const Tensor<T>& av = tape.value(a);
  require(begin + count <= av.cols, "slice_cols: range out of bounds");
  Tensor<T> out(av.rows, count);
  for (std::size_t r = 0; r < av.rows; ++r) std::copy(av.row(r) + begin, av.row(r) + begin + count, out.row(r));
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a}, [&tape, a, o, begin, count] {
    const Tensor<T>& go = tape.grad(o);
    Tensor<T>* g = tape.grad_buffer(a);
    for (std::size_t r = 0; r < go.rows; ++r)
      for (std::size_t c = 0; c < count; ++c) (*g)(r, begin + c) += go(r, c);
  });
}

/// out[i] = a[idx[i]]
template <class T>
Var gather_rows(Tape<T>& tape, Var a, std::vector<std::uint32_t> idx) {
  const Tensor<T>& av = tape.value(a);
  Tensor<T> out(idx.size(), av.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < av.rows, "gather_rows: index out of range");
    std::copy(av.row(idx[i]), av.row(idx[i]) + av.cols, out.row(i));
  }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a}, [&tape, a, o, idx = std::move(idx)] {
    const Tensor<T>& go = tape.grad(o);
    Tensor<T>* g = tape.grad_buffer(a);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = g->row(idx[i]);
      const T* src = go.row(i);
      for (std::size_t c = 0; c < go.cols; ++c) dst[c] += src[c];
    }
  });
}

/// out[idx[i]] += a[i]; out has n_out rows. Accumulation follows the row
/// order of `a`, so results are bitwise reproducible.
template <class T>
Var scatter_add_rows(Tape<T>& tape, Var a, std::vector<std::uint32_t> idx, std::size_t n_out) {
  const Tensor<T>& av = tape.value(a);
  require(idx.size() == av.rows, "scatter_add_rows: index count must equal row count");
  Tensor<T> out(n_out, av.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < n_out, "scatter_add_rows: index out of range");
    T* dst = out.row(idx[i]);
    const T* src = av.row(i);
    for (std::size_t c = 0; c < av.cols; ++c) dst[c] += src[c];
  }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a}, [&tape, a, o, idx = std::move(idx)] {
    const Tensor<T>& go = tape.grad(o);
    Tensor<T>* g = tape.grad_buffer(a);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = go.row(idx[i]);
      T* dst = g->row(i);
      for (std::size_t c = 0; c < go.cols; ++c) dst[c] += src[c];
    }
  });
}

/// Max over consecutive row groups of size `group`: (n*group x m) -> (n x m).
/// The gradient goes to the first maximal row of each group.
template <class T>
Var group_max(Tape<T>& tape, Var a, std::size_t group) {
  const Tensor<T>& av = tape.value(a);
  require(group >= 1 && av.rows % group == 0, "group_max: rows not divisible by group size");
  const std::size_t n = av.rows / group;
  Tensor<T> out(n, av.cols);
  std::vector<std::uint32_t> arg(n * av.cols);
  for (std::size_t gi = 0; gi < n; ++gi)
    for (std::size_t c = 0; c < av.cols; ++c) {
      std::size_t best = gi * group;
      for (std::size_t r = gi * group + 1; r < (gi + 1) * group; ++r)
        if (av(r, c) > av(best, c)) best = r;
      out(gi, c) = av(best, c);
      arg[gi * av.cols + c] = static_cast<std::uint32_t>(best);
    }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a}, [&tape, a, o, arg = std::move(arg)] {
    const Tensor<T>& go = tape.grad(o);
    Tensor<T>* g = tape.grad_buffer(a);
    for (std::size_t gi = 0; gi < go.rows; ++gi)
      for (std::size_t c = 0; c < go.cols; ++c) (*g)(arg[gi * go.cols + c], c) += go(gi, c);
  });
}

/// Sum over consecutive row groups of size `group`.
template <class T>
Var group_sum(Tape<T>& tape, Var a, std::size_t group) {
  const Tensor<T>& av = tape.value(a);
  require(group >= 1 && av.rows % group == 0, "group_sum: rows not divisible by group size");
  const std::size_t n = av.rows / group;
  Tensor<T> out(n, av.cols);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t c = 0; c < av.cols; ++c) out(r / group, c) += av(r, c);
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a}, [&tape, a, o, group] {
    const Tensor<T>& go = tape.grad(o);
    Tensor<T>* g = tape.grad_buffer(a);
    for (std::size_t r = 0; r < g->rows; ++r)
      for (std::size_t c = 0; c < g->cols; ++c) (*g)(r, c) += go(r / group, c);
  });
}

/// Column-wise softmax within consecutive row groups of size `group`.
template <class T>
Var group_softmax(Tape<T>& tape, Var a, std::size_t group) {
  const Tensor<T>& av = tape.value(a);
  require(group >= 1 && av.rows % group == 0, "group_softmax: rows not divisible by group size");
  Tensor<T> out(av.rows, av.cols);
  for (std::size_t g0 = 0; g0 < av.rows; g0 += group)
    for (std::size_t c = 0; c < av.cols; ++c) {
      T mx = av(g0, c);
      for (std::size_t r = g0 + 1; r < g0 + group; ++r) mx = std::max(mx, av(r, c));
      T s = 0;
      for (std::size_t r = g0; r < g0 + group; ++r) s += (out(r, c) = std::exp(av(r, c) - mx));
      for (std::size_t r = g0; r < g0 + group; ++r) out(r, c) /= s;
    }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a}, [&tape, a, o, group] {
    const Tensor<T>& go = tape.grad(o);
    const Tensor<T>& y = tape.value(o);
    Tensor<T>* g = tape.grad_buffer(a);
    for (std::size_t g0 = 0; g0 < y.rows; g0 += group)
      for (std::size_t c = 0; c < y.cols; ++c) {
        T s = 0;
        for (std::size_t r = g0; r < g0 + group; ++r) s += go(r, c) * y(r, c);
        for (std::size_t r = g0; r < g0 + group; ++r) (*g)(r, c) += y(r, c) * (go(r, c) - s);
      }
  });
}

/// Per-head row dot product: a, b (n x heads*d) -> (n x heads).
template <class T>
Var rowdot_heads(Tape<T>& tape, Var a, Var b, std::size_t heads) {
  const Tensor<T>& av = tape.value(a);
  detail::check_same_shape(av, tape.value(b), "rowdot_heads");
  require(heads >= 1 && av.cols % heads == 0, "rowdot_heads: width not divisible by heads");
  const std::size_t d = av.cols / heads;
  const Tensor<T>& bv = tape.value(b);
  Tensor<T> out(av.rows, heads);
  for (std::size_t r = 0; r < av.rows; ++r)
    for (std::size_t h = 0; h < heads; ++h) {
      T s = 0;
      for (std::size_t k = 0; k < d; ++k) s += av(r, h * d + k) * bv(r, h * d + k);
      out(r, h) = s;
    }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {a, b}, [&tape, a, b, o, heads, d] {
    const Tensor<T>& go = tape.grad(o);
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    Tensor<T>* ga = tape.grad_buffer(a);
    Tensor<T>* gb = tape.grad_buffer(b);
    for (std::size_t r = 0; r < av.rows; ++r)
      for (std::size_t h = 0; h < heads; ++h) {
        const T gh = go(r, h);
        for (std::size_t k = 0; k < d; ++k) {
          if (ga) (*ga)(r, h * d + k) += gh * bv(r, h * d + k);
          if (gb) (*gb)(r, h * d + k) += gh * av(r, h * d + k);
        }
      }
  });
}

/// Scales head block h of v (n x heads*d) by w(:, h) (n x heads).
template <class T>
Var mul_heads(Tape<T>& tape, Var v, Var w) {
  const Tensor<T>& vv = tape.value(v);
  const Tensor<T>& wv = tape.value(w);
  require(wv.rows == vv.rows && wv.cols >= 1 && vv.cols % wv.cols == 0, "mul_heads: shape mismatch");
  const std::size_t heads = wv.cols, d = vv.cols / heads;
  Tensor<T> out = vv;
  for (std::size_t r = 0; r < vv.rows; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t k = 0; k < d; ++k) out(r, h * d + k) *= wv(r, h);
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {v, w}, [&tape, v, w, o, heads, d] {
    const Tensor<T>& go = tape.grad(o);
    const Tensor<T>& vv = tape.value(v);
    const Tensor<T>& wv = tape.value(w);
    Tensor<T>* gv = tape.grad_buffer(v);
    Tensor<T>* gw = tape.grad_buffer(w);
    for (std::size_t r = 0; r < vv.rows; ++r)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t k = 0; k < d; ++k) {
          if (gv) (*gv)(r, h * d + k) += go(r, h * d + k) * wv(r, h);
          if (gw) (*gw)(r, h) += go(r, h * d + k) * vv(r, h * d + k);
        }
  });
}

/// Row-wise layer normalization with affine gain and bias (1 x m each).
template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  const Tensor<T>& xv = tape.value(x);
  const std::size_t n = xv.rows, m = xv.cols;
  require(tape.value(gain).cols == m && tape.value(bias).cols == m, "layer_norm: affine shape mismatch");
  Tensor<T> xhat(n, m);
  std::vector<T> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    T mean = 0;
    for (std::size_t c = 0; c < m; ++c) mean += xv(r, c);
    mean /= static_cast<T>(m);
    T var = 0;
    for (std::size_t c = 0; c < m; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<T>(m);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) xhat(r, c) = (xv(r, c) - mean) * inv_std[r];
  }
  Tensor<T> out(n, m);
  const Tensor<T>& gv = tape.value(gain);
  const Tensor<T>& bv = tape.value(bias);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out(r, c) = xhat(r, c) * gv.data[c] + bv.data[c];
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {x, gain, bias},
                     [&tape, x, gain, bias, o, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                       const Tensor<T>& go = tape.grad(o);
                       const Tensor<T>& gv = tape.value(gain);
                       const std::size_t n = go.rows, m = go.cols;
                       if (Tensor<T>* gg = tape.grad_buffer(gain))
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t c = 0; c < m; ++c) gg->data[c] += go(r, c) * xhat(r, c);
                       if (Tensor<T>* gb = tape.grad_buffer(bias))
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t c = 0; c < m; ++c) gb->data[c] += go(r, c);
                       if (Tensor<T>* gx = tape.grad_buffer(x))
                         for (std::size_t r = 0; r < n; ++r) {
                           T s1 = 0, s2 = 0;
                           for (std::size_t c = 0; c < m; ++c) {
                             const T gh = go(r, c) * gv.data[c];
                             s1 += gh;
                             s2 += gh * xhat(r, c);
                           }
                           s1 /= static_cast<T>(m);
                           s2 /= static_cast<T>(m);
                           for (std::size_t c = 0; c < m; ++c) {
                             const T gh = go(r, c) * gv.data[c];
                             (*gx)(r, c) += inv_std[r] * (gh - s1 - xhat(r, c) * s2);
                           }
                         }
                     });
}

/// Rotates each row of v (n x 2) by sign * theta (n x 1).
template <class T>
Var rotate_rows(Tape<T>& tape, Var v, Var theta, T sign = T(1)) {
  const Tensor<T>& vv = tape.value(v);
  const Tensor<T>& tv = tape.value(theta);
  require(vv.cols == 2 && tv.cols == 1 && tv.rows == vv.rows, "rotate_rows: shape mismatch");
  Tensor<T> out(vv.rows, 2);
  for (std::size_t r = 0; r < vv.rows; ++r) {
    const T c = std::cos(sign * tv.data[r]), s = std::sin(sign * tv.data[r]);
    out(r, 0) = c * vv(r, 0) - s * vv(r, 1);
    out(r, 1) = s * vv(r, 0) + c * vv(r, 1);
  }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {v, theta}, [&tape, v, theta, o, sign] {
    const Tensor<T>& go = tape.grad(o);
    const Tensor<T>& tv = tape.value(theta);
    const Tensor<T>& y = tape.value(o);
    Tensor<T>* gv = tape.grad_buffer(v);
    Tensor<T>* gt = tape.grad_buffer(theta);
    for (std::size_t r = 0; r < go.rows; ++r) {
      const T c = std::cos(sign * tv.data[r]), s = std::sin(sign * tv.data[r]);
      if (gv) {
        (*gv)(r, 0) += c * go(r, 0) + s * go(r, 1);
        (*gv)(r, 1) += -s * go(r, 0) + c * go(r, 1);
      }
      // d/dtheta R(sign*theta) v = sign * J y, with J the quarter turn.
      if (gt) gt->data[r] += sign * (-y(r, 1) * go(r, 0) + y(r, 0) * go(r, 1));
    }
  });
}

/// Monomials of the row entries up to the given degree (1..3), without the
/// constant: [x, x (x) x, x (x) x (x) x] flattened.
template <class T>
Var polynomial_features(Tape<T>& tape, Var x, int degree) {
  require(degree >= 1 && degree <= 3, "polynomial_features: degree must be 1, 2 or 3");
  const Tensor<T>& xv = tape.value(x);
  const std::size_t k = xv.cols;
  std::size_t width = k;
  if (degree >= 2) width += k * k;
  if (degree >= 3) width += k * k * k;
  Tensor<T> out(xv.rows, width);
  for (std::size_t r = 0; r < xv.rows; ++r) {
    const T* a = xv.row(r);
    T* o = out.row(r);
    std::size_t p = 0;
    for (std::size_t i = 0; i < k; ++i) o[p++] = a[i];
    if (degree >= 2)
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) o[p++] = a[i] * a[j];
    if (degree >= 3)
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t l = 0; l < k; ++l) o[p++] = a[i] * a[j] * a[l];
  }
  Var o{static_cast<std::uint32_t>(tape.size())};
  return tape.record(std::move(out), {x}, [&tape, x, o, degree, k] {
    const Tensor<T>& go = tape.grad(o);
    const Tensor<T>& xv = tape.value(x);
    Tensor<T>* gx = tape.grad_buffer(x);
    for (std::size_t r = 0; r < xv.rows; ++r) {
      const T* a = xv.row(r);
      const T* g = go.row(r);
      T* d = gx->row(r);
      std::size_t p = 0;
      for (std::size_t i = 0; i < k; ++i) d[i] += g[p++];
      if (degree >= 2)
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j, ++p) {
            d[i] += g[p] * a[j];
            d[j] += g[p] * a[i];
          }
      if (degree >= 3)
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            for (std::size_t l = 0; l < k; ++l, ++p) {
              d[i] += g[p] * a[j] * a[l];
              d[j] += g[p] * a[i] * a[l];
              d[l] += g[p] * a[i] * a[j];
            }
    }
  });
}

}  // namespace eqcollide::ad
