// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "eqcollide/error.hpp"

namespace eqcollide {

using Index = std::uint32_t;

template <class T>
struct Vec2 {
  T x{0};
  T y{0};

  constexpr Vec2() = default;
  constexpr Vec2(T x_, T y_) : x(x_), y(y_) {}

  template <class U>
  constexpr explicit Vec2(const Vec2<U>& o) : x(static_cast<T>(o.x)), y(static_cast<T>(o.y)) {}

  constexpr Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator-() const { return {-x, -y}; }
  constexpr Vec2 operator*(T s) const { return {x * s, y * s}; }
  constexpr Vec2& operator+=(const Vec2& o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  constexpr Vec2& operator-=(const Vec2& o) {
    x -= o.x;
    y -= o.y;
    return *this;
  }
  constexpr bool operator==(const Vec2&) const = default;
};

template <class T>
constexpr Vec2<T> operator*(T s, const Vec2<T>& v) {
  return v * s;
}
template <class T>
constexpr T dot(const Vec2<T>& a, const Vec2<T>& b) {
  return a.x * b.x + a.y * b.y;
}
template <class T>
constexpr T cross(const Vec2<T>& a, const Vec2<T>& b) {
  return a.x * b.y - a.y * b.x;
}
template <class T>
constexpr T squared_norm(const Vec2<T>& a) {
  return dot(a, a);
}
template <class T>
T norm(const Vec2<T>& a) {
  return std::sqrt(squared_norm(a));
}
template <class T>
bool is_finite(const Vec2<T>& a) {
  return std::isfinite(a.x) && std::isfinite(a.y);
}

/// Counter-clockwise rotation of `v` by `angle`.
template <class T>
Vec2<T> rotate(const Vec2<T>& v, T angle) {
  const T c = std::cos(angle);
  const T s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Wraps an angle to (-pi, pi].
template <class T>
T wrap_angle(T a) {
  constexpr T pi = std::numbers::pi_v<T>;
  constexpr T two_pi = 2 * std::numbers::pi_v<T>;
  if (a > -pi && a <= pi) return a;
  T r = std::fmod(a + pi, two_pi);
  if (r < 0) r += two_pi;
  r -= pi;
  // fmod maps +pi to -pi; the interval is open at -pi.
  return r <= -pi ? pi : r;
}

template <class T>
struct Pose2 {
  Vec2<T> position;
  T orientation{0};  // always in (-pi, pi]

  constexpr bool operator==(const Pose2&) const = default;
};

/// Planar rigid motion x -> R(angle) x + translation. The translation-only
/// subgroup is the set of elements with angle == 0.
template <class T>
struct GroupElement {
  T angle{0};
  Vec2<T> translation{};

  static GroupElement identity() { return {}; }

  bool is_translation() const { return angle == T(0); }
  bool is_identity() const { return angle == T(0) && translation == Vec2<T>{}; }

  Vec2<T> act_point(const Vec2<T>& x) const { return rotate(x, angle) + translation; }
  Vec2<T> act_vector(const Vec2<T>& v) const { return rotate(v, angle); }
  Pose2<T> act_pose(const Pose2<T>& p) const {
    return {act_point(p.position), wrap_angle(p.orientation + angle)};
  }
  T act_angle(T theta) const { return wrap_angle(theta + angle); }

  GroupElement inverse() const {
    return {wrap_angle(-angle), -rotate(translation, -angle)};
  }

  /// (*this) o (first): apply `first`, then *this.
  GroupElement compose(const GroupElement& first) const {
    return {wrap_angle(angle + first.angle), rotate(first.translation, angle) + translation};
  }
};

template <class T>
struct GroupApplied {
  std::vector<Vec2<T>> positions;
  std::vector<Vec2<T>> vectors;
  std::vector<Pose2<T>> poses;
};

/// Positions transform as points, `vectors` as free vectors (translation is
/// ignored), poses as oriented points.
template <class T>
GroupApplied<T> apply_group(const GroupElement<T>& g, std::span<const Vec2<T>> positions,
                            std::span<const Vec2<T>> vectors = {},
                            std::span<const Pose2<T>> poses = {}) {
  require(std::isfinite(g.angle) && is_finite(g.translation), "apply_group: non-finite group element");
  GroupApplied<T> out;
  out.positions.reserve(positions.size());
  for (const auto& x : positions) {
    require(is_finite(x), "apply_group: non-finite position");
    out.positions.push_back(g.act_point(x));
  }
  out.vectors.reserve(vectors.size());
  for (const auto& v : vectors) {
    require(is_finite(v), "apply_group: non-finite vector");
    out.vectors.push_back(g.act_vector(v));
  }
  out.poses.reserve(poses.size());
  for (const auto& p : poses) {
    require(is_finite(p.position) && std::isfinite(p.orientation), "apply_group: non-finite pose");
    out.poses.push_back(g.act_pose(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Uniform-grid spatial hash. Cells are keyed by integer coordinates; buckets
// keep insertion order so every query is deterministic.
// ---------------------------------------------------------------------------

class SpatialHash {
 public:
  template <class T>
  SpatialHash(std::span<const Vec2<T>> points, double cell_size) : cell_(cell_size) {
    require(cell_size > 0, "SpatialHash: cell size must be positive");
    buckets_.reserve(points.size());
    for (Index i = 0; i < points.size(); ++i) {
      buckets_[key(cell_of(static_cast<double>(points[i].x)), cell_of(static_cast<double>(points[i].y)))]
          .push_back(i);
    }
  }

  /// Calls fn(index) for every point whose cell overlaps the disk's bounding box.
  template <class Fn>
  void for_each_candidate(double px, double py, double radius, Fn&& fn) const {
    const std::int64_t x0 = cell_of(px - radius), x1 = cell_of(px + radius);
    const std::int64_t y0 = cell_of(py - radius), y1 = cell_of(py + radius);
    for (std::int64_t cx = x0; cx <= x1; ++cx) {
      for (std::int64_t cy = y0; cy <= y1; ++cy) {
        auto it = buckets_.find(key(cx, cy));
        if (it == buckets_.end()) continue;
        for (Index i : it->second) fn(i);
      }
    }
  }

 private:
  std::int64_t cell_of(double c) const { return static_cast<std::int64_t>(std::floor(c / cell_)); }
  static std::uint64_t key(std::int64_t cx, std::int64_t cy) {
    return (static_cast<std::uint64_t>(cx) << 32) ^ (static_cast<std::uint64_t>(cy) & 0xffffffffULL);
  }

  double cell_;
  std::unordered_map<std::uint64_t, std::vector<Index>> buckets_;
};

// ---------------------------------------------------------------------------
// Sampling and grouping
// ---------------------------------------------------------------------------

/// Greedy farthest point sampling seeded by the point farthest from the
/// centroid. Ties go to the lowest index at every step. Distances are
/// evaluated in double precision regardless of T.
template <class T>
std::vector<Index> farthest_point_sample(std::span<const Vec2<T>> points, std::size_t n_samples) {
  const std::size_t n = points.size();
  require(n_samples >= 1 && n_samples <= n, "farthest_point_sample: n_samples must be in [1, number of points]");
  double cx = 0, cy = 0;
  for (const auto& p : points) {
    cx += static_cast<double>(p.x);
    cy += static_cast<double>(p.y);
  }
  cx /= static_cast<double>(n);
  cy /= static_cast<double>(n);

  auto d2 = [&](Index i, double x, double y) {
    const double dx = static_cast<double>(points[i].x) - x;
    const double dy = static_cast<double>(points[i].y) - y;
    return dx * dx + dy * dy;
  };

  Index seed = 0;
  double best = -1;
  for (Index i = 0; i < n; ++i) {
    const double d = d2(i, cx, cy);
    if (d > best) {
      best = d;
      seed = i;
    }
  }

  std::vector<Index> selected;
  selected.reserve(n_samples);
  selected.push_back(seed);
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  while (selected.size() < n_samples) {
    const Index last = selected.back();
    const double lx = static_cast<double>(points[last].x);
    const double ly = static_cast<double>(points[last].y);
    Index next = 0;
    double far = -1;
    for (Index i = 0; i < n; ++i) {
      min_d[i] = std::min(min_d[i], d2(i, lx, ly));
      if (min_d[i] > far) {
        far = min_d[i];
        next = i;
      }
    }
    selected.push_back(next);
  }
  return selected;
}

struct NeighborList {
  std::vector<Index> indices;  // n_centers * max_k, row-major
  double radius = 0;
  std::size_t max_k = 0;

  std::size_t n_centers() const { return max_k == 0 ? 0 : indices.size() / max_k; }
  std::span<const Index> of(std::size_t center) const {
    return std::span<const Index>(indices).subspan(center * max_k, max_k);
  }
};

/// Up to `max_k` points within `radius` of each center, nearest first (ties by
/// index). Short lists are padded by repeating the nearest neighbor; a
/// center is a cloud member so every list is non-empty.
template <class T>
NeighborList ball_query(std::span<const Index> centers, std::span<const Vec2<T>> points, double radius,
                        std::size_t max_k) {
  require(radius > 0, "ball_query: radius must be positive");
  require(max_k >= 1, "ball_query: max_k must be >= 1");
  for (Index c : centers) require(c < points.size(), "ball_query: center index out of range");

  NeighborList out;
  out.radius = radius;
  out.max_k = max_k;
  out.indices.reserve(centers.size() * max_k);

  const SpatialHash grid(points, radius);
  const double r2 = radius * radius;
  std::vector<std::pair<double, Index>> cand;
  for (Index c : centers) {
    const double px = static_cast<double>(points[c].x);
    const double py = static_cast<double>(points[c].y);
    cand.clear();
    grid.for_each_candidate(px, py, radius, [&](Index i) {
      const double dx = static_cast<double>(points[i].x) - px;
      const double dy = static_cast<double>(points[i].y) - py;
      const double d = dx * dx + dy * dy;
      if (d <= r2) cand.emplace_back(d, i);
    });
    const std::size_t k = std::min(max_k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t j = 0; j < k; ++j) out.indices.push_back(cand[j].second);
    for (std::size_t j = k; j < max_k; ++j) out.indices.push_back(cand[0].second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Invariant attributes
// ---------------------------------------------------------------------------

/// Unsigned angle in [0, pi] between a and b; 0 when either is zero-length.
template <class T>
T unsigned_angle(const Vec2<T>& a, const Vec2<T>& b) {
  if (squared_norm(a) == T(0) || squared_norm(b) == T(0)) return T(0);
  return std::abs(std::atan2(cross(a, b), dot(a, b)));
}

/// Cosine similarity; 0 when either operand is zero-length.
template <class T>
T cosine_similarity(const Vec2<T>& a, const Vec2<T>& b) {
  const T na = norm(a), nb = norm(b);
  if (na == T(0) || nb == T(0)) return T(0);
  return std::clamp(dot(a, b) / (na * nb), T(-1), T(1));
}

/// The five rotation-invariant scalars of a (center F, neighbor Q) pair:
/// {angle(vF, F-Q), angle(vQ, F-Q), |F-Q|^2, |vF-vQ|^2, cos(F-Q, vF-vQ)}.
template <class T>
std::array<T, 5> rotation_invariants(const Vec2<T>& f, const Vec2<T>& vf, const Vec2<T>& q, const Vec2<T>& vq) {
  const Vec2<T> rel = f - q;
  const Vec2<T> dv = vf - vq;
  return {unsigned_angle(vf, rel), unsigned_angle(vq, rel), squared_norm(rel), squared_norm(dv),
          cosine_similarity(rel, dv)};
}

/// SE(2) bi-invariant of a pose pair: pose_j's position in pose_i's frame
/// and the wrapped relative orientation.
template <class T>
std::array<T, 3> se2_bi_invariant(const Pose2<T>& pose_i, const Pose2<T>& pose_j) {
  const Vec2<T> rel = rotate(pose_j.position - pose_i.position, -pose_i.orientation);
  return {rel.x, rel.y, wrap_angle(pose_j.orientation - pose_i.orientation)};
}

/// Translation-group counterpart: relative position plus both raw
/// orientations (orientation is not acted on by translations).
template <class T>
std::array<T, 4> translation_bi_invariant(const Pose2<T>& pose_i, const Pose2<T>& pose_j) {
  const Vec2<T> rel = pose_j.position - pose_i.position;
  return {rel.x, rel.y, pose_i.orientation, pose_j.orientation};
}

/// Direction angle of v, or 0 below `min_speed`.
template <class T>
T heading(const Vec2<T>& v, T min_speed = T(1e-8)) {
  if (norm(v) < min_speed) return T(0);
  return wrap_angle(std::atan2(v.y, v.x));
}

}  // namespace eqcollide
