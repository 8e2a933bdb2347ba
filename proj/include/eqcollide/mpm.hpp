// SPDX-License-Identifier: Apache-2.0
//
// Ground-truth generator: procedural 2D shapes and a moving-least-squares
// material point method (MLS-MPM) solver with fixed-corotated elasticity,
// quadratic B-spline transfers and APIC affine momentum.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqcollide/error.hpp"
#include "eqcollide/json_section.hpp"
#include "eqcollide/geometry.hpp"
#include "eqcollide/hash.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide::mpm {

using Vec2d = Vec2<double>;

struct MpmConfig {
  // Solver.
  int resolution = 64;           // grid cells per side of the unit square
  int substeps = 20;             // substeps per recorded frame
  double frame_dt = 0.002;       // seconds between recorded frames
  double youngs_modulus = 1e4;   // simulator units
  double poisson_ratio = 0.2;
  double density = 1.0;
  double gravity = 10.0;         // magnitude, acting along -y
  int boundary_cells = 3;        // thickness of the wall layer in cells
  std::string boundary = "separating";  // "separating" or "sticky"
  double max_cfl = 1.0;          // bound on wave speed * substep dt / dx

  // Scene.
  std::vector<std::string> shape_families{"convex", "star", "rounded_rect", "disk"};
  double object_size_min = 0.14;  // extent of the longest side of an object
  double object_size_max = 0.20;
  double floor_gap_min = 0.01;    // gap between the lowest object and the floor
  double floor_gap_max = 0.04;
  double stack_gap_min = 0.005;   // gap between vertically stacked objects
  double stack_gap_max = 0.03;
  double horizontal_spread = 0.08;  // max horizontal offset between stacked objects
  double initial_speed_max = 0.0;   // objects start at rest by default
  int placement_retries = 100;
  int contact_retries = 20;

  double dx() const { return 1.0 / resolution; }
  double substep_dt() const { return frame_dt / substeps; }
  double floor_coordinate() const { return boundary_cells * dx(); }
  double mu() const { return youngs_modulus / (2 * (1 + poisson_ratio)); }
  double lambda() const {
    return youngs_modulus * poisson_ratio / ((1 + poisson_ratio) * (1 - 2 * poisson_ratio));
  }
  double wave_speed() const { return std::sqrt((lambda() + 2 * mu()) / density); }

  void validate() const {
    require(resolution >= 16, "mpm.resolution must be >= 16");
    require(substeps >= 1, "mpm.substeps must be >= 1");
    require(poisson_ratio >= 0 && poisson_ratio < 0.5, "mpm.poisson_ratio must be in [0, 0.5)");
    require(youngs_modulus > 0 && density > 0, "mpm.youngs_modulus and mpm.density must be positive");
    require(frame_dt > 0, "mpm.frame_dt must be positive");
    require(gravity >= 0, "mpm.gravity is a magnitude and must be >= 0");
    require(boundary_cells >= 2 && boundary_cells < resolution / 4, "mpm.boundary_cells out of range");
    require(boundary == "separating" || boundary == "sticky", "mpm.boundary must be 'separating' or 'sticky'");
    require(object_size_min > 0 && object_size_max >= object_size_min, "mpm.object_size range invalid");
    require(floor_gap_min >= 0 && floor_gap_max >= floor_gap_min, "mpm.floor_gap range invalid");
    require(stack_gap_min > 0 && stack_gap_max >= stack_gap_min, "mpm.stack_gap range invalid");
    require(!shape_families.empty(), "mpm.shape_families must not be empty");
    const double cfl = wave_speed() * substep_dt() / dx();
    require(cfl <= max_cfl, "mpm: CFL number " + std::to_string(cfl) + " exceeds " + std::to_string(max_cfl) +
                                "; increase mpm.substeps");
  }
};

inline void to_json(nlohmann::json& j, const MpmConfig& c) {
  j = {{"resolution", c.resolution},
       {"substeps", c.substeps},
       {"frame_dt", c.frame_dt},
       {"youngs_modulus", c.youngs_modulus},
       {"poisson_ratio", c.poisson_ratio},
       {"density", c.density},
       {"gravity", c.gravity},
       {"boundary_cells", c.boundary_cells},
       {"boundary", c.boundary},
       {"max_cfl", c.max_cfl},
       {"shape_families", c.shape_families},
       {"object_size_min", c.object_size_min},
       {"object_size_max", c.object_size_max},
       {"floor_gap_min", c.floor_gap_min},
       {"floor_gap_max", c.floor_gap_max},
       {"stack_gap_min", c.stack_gap_min},
       {"stack_gap_max", c.stack_gap_max},
       {"horizontal_spread", c.horizontal_spread},
       {"initial_speed_max", c.initial_speed_max},
       {"placement_retries", c.placement_retries},
       {"contact_retries", c.contact_retries}};
}

/// Reads an "mpm" config section; unknown keys are rejected.
inline MpmConfig mpm_config_from_json(const nlohmann::json& j, const std::string& path = "mpm") {
  MpmConfig c;
  JsonSection s(j, path);
  s.get("resolution", c.resolution)
      .get("substeps", c.substeps)
      .get("frame_dt", c.frame_dt)
      .get("youngs_modulus", c.youngs_modulus)
      .get("poisson_ratio", c.poisson_ratio)
      .get("density", c.density)
      .get("gravity", c.gravity)
      .get("boundary_cells", c.boundary_cells)
      .get("boundary", c.boundary)
      .get("max_cfl", c.max_cfl)
      .get("shape_families", c.shape_families)
      .get("object_size_min", c.object_size_min)
      .get("object_size_max", c.object_size_max)
      .get("floor_gap_min", c.floor_gap_min)
      .get("floor_gap_max", c.floor_gap_max)
      .get("stack_gap_min", c.stack_gap_min)
      .get("stack_gap_max", c.stack_gap_max)
      .get("horizontal_spread", c.horizontal_spread)
      .get("initial_speed_max", c.initial_speed_max)
      .get("placement_retries", c.placement_retries)
      .get("contact_retries", c.contact_retries);
  s.finish();
  return c;
}

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

/// A closed region in unit scale: centered on its bounding box, longest
/// side equal to 1.
struct Shape {
  std::string family;
  std::vector<Vec2d> polygon;  // counter-clockwise; empty for analytic shapes
  double corner_radius = 0;    // rounded_rect
  Vec2d half_extent{};         // rounded_rect / disk bounding half sizes

  bool contains(const Vec2d& p) const {
    if (family == "disk") return squared_norm(p) <= 0.25;
    if (family == "rounded_rect") {
      const Vec2d q{std::abs(p.x) - (half_extent.x - corner_radius), std::abs(p.y) - (half_extent.y - corner_radius)};
      const Vec2d qp{std::max(q.x, 0.0), std::max(q.y, 0.0)};
      const double sd = norm(qp) + std::min(std::max(q.x, q.y), 0.0) - corner_radius;
      return sd <= 0;
    }
    // Even-odd rule.
    bool inside = false;
    for (std::size_t i = 0, j = polygon.size() - 1; i < polygon.size(); j = i++) {
      const Vec2d& a = polygon[i];
      const Vec2d& b = polygon[j];
      if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) inside = !inside;
    }
    return inside;
  }
};

namespace detail {
inline void normalize_polygon(std::vector<Vec2d>& poly) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& p : poly) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const double s = 1.0 / std::max(x1 - x0, y1 - y0);
  const Vec2d c{(x0 + x1) / 2, (y0 + y1) / 2};
  for (auto& p : poly) p = (p - c) * s;
}
}  // namespace detail

/// Procedural shape families: "square", "convex", "star", "rounded_rect",
/// "disk". `n_vertices` sets the polygon vertex count (star: points).
inline Shape make_shape(const std::string& family, std::uint64_t seed, int n_vertices = 7) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Shape s;
  s.family = family;
  constexpr double two_pi = 2 * std::numbers::pi;
  if (family == "square") {
    s.polygon = {{-0.5, -0.5}, {0.5, -0.5}, {0.5, 0.5}, {-0.5, 0.5}};
  } else if (family == "convex") {
    require(n_vertices >= 3, "convex shapes need at least 3 vertices");
    // Evenly spaced angles with jitter keep the polygon convex and fat.
    const double base = u(rng) * two_pi;
    for (int k = 0; k < n_vertices; ++k) {
      const double a = base + two_pi * (k + 0.35 * (u(rng) - 0.5)) / n_vertices;
      s.polygon.push_back({std::cos(a), std::sin(a)});
    }
    detail::normalize_polygon(s.polygon);
  } else if (family == "star") {
    require(n_vertices >= 3, "star shapes need at least 3 points");
    const double inner = 0.55 + 0.25 * u(rng);
    const double base = u(rng) * two_pi;
    for (int k = 0; k < 2 * n_vertices; ++k) {
      const double a = base + std::numbers::pi * k / n_vertices;
      const double r = (k % 2 == 0) ? 1.0 : inner;
      s.polygon.push_back({r * std::cos(a), r * std::sin(a)});
    }
    detail::normalize_polygon(s.polygon);
  } else if (family == "rounded_rect") {
    const double aspect = 0.5 + 0.5 * u(rng);
    s.half_extent = {0.5, 0.5 * aspect};
    s.corner_radius = (0.05 + 0.15 * u(rng)) * aspect;
  } else if (family == "disk") {
    s.half_extent = {0.5, 0.5};
  } else {
    throw ValidationError("unknown shape family '" + family + "'");
  }
  return s;
}

/// Bounding box of a shape in unit scale.
inline std::array<double, 4> shape_bounds(const Shape& s) {
  if (!s.polygon.empty()) {
    std::array<double, 4> b{1e300, 1e300, -1e300, -1e300};
    for (const auto& p : s.polygon) {
      b[0] = std::min(b[0], p.x);
      b[1] = std::min(b[1], p.y);
      b[2] = std::max(b[2], p.x);
      b[3] = std::max(b[3], p.y);
    }
    return b;
  }
  return {-s.half_extent.x, -s.half_extent.y, s.half_extent.x, s.half_extent.y};
}

/// `n_points` points uniformly distributed over the interior of `shape`,
/// deterministic per seed.
inline std::vector<Vec2d> fill_shape(const Shape& shape, std::size_t n_points, std::uint64_t seed) {
  require(n_points >= 1, "fill_shape: need at least one point");
  const auto b = shape_bounds(shape);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> ux(b[0], b[2]), uy(b[1], b[3]);
  std::vector<Vec2d> pts;
  pts.reserve(n_points);
  std::size_t attempts = 0;
  while (pts.size() < n_points) {
    require(++attempts < 1000 * n_points + 1000, "fill_shape: rejection sampling failed");
    const Vec2d p{ux(rng), uy(rng)};
    if (shape.contains(p)) pts.push_back(p);
  }
  return pts;
}

/// Shape family by name, then interior fill.
inline std::vector<Vec2d> sample_shape(std::uint64_t seed, const std::string& family, std::size_t n_points,
                                       int n_vertices = 7) {
  return fill_shape(make_shape(family, seed, n_vertices), n_points, seed);
}

/// Import hook: recenters an external point set on its bounding box and
/// rescales its longest side to 1.
inline std::vector<Vec2d> normalize_point_set(std::vector<Vec2d> pts) {
  require(pts.size() >= 3, "imported point set needs at least 3 points");
  detail::normalize_polygon(pts);
  return pts;
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

struct Mat2 {
  double a00 = 0, a01 = 0, a10 = 0, a11 = 0;
  static Mat2 identity() { return {1, 0, 0, 1}; }
  Mat2 operator+(const Mat2& o) const { return {a00 + o.a00, a01 + o.a01, a10 + o.a10, a11 + o.a11}; }
  Mat2 operator*(double s) const { return {a00 * s, a01 * s, a10 * s, a11 * s}; }
  Mat2 operator*(const Mat2& o) const {
    return {a00 * o.a00 + a01 * o.a10, a00 * o.a01 + a01 * o.a11, a10 * o.a00 + a11 * o.a10,
            a10 * o.a01 + a11 * o.a11};
  }
  Vec2d operator*(const Vec2d& v) const { return {a00 * v.x + a01 * v.y, a10 * v.x + a11 * v.y}; }
  Mat2 transposed() const { return {a00, a10, a01, a11}; }
  double det() const { return a00 * a11 - a01 * a10; }
  bool finite() const {
    return std::isfinite(a00) && std::isfinite(a01) && std::isfinite(a10) && std::isfinite(a11);
  }
};

/// Rotation factor of the 2D polar decomposition F = R S.
inline Mat2 polar_rotation(const Mat2& f) {
  const double x = f.a00 + f.a11, y = f.a10 - f.a01;
  const double n = std::hypot(x, y);
  if (n == 0) return Mat2::identity();
  const double c = x / n, s = y / n;
  return {c, -s, s, c};
}

struct Particle {
  Vec2d x;
  Vec2d v;
  Mat2 affine;                       // APIC velocity gradient C
  Mat2 deformation = Mat2::identity();  // F
  double mass = 0;
  double volume = 0;
  Index object = 0;
};

class MpmSolver {
 public:
  explicit MpmSolver(MpmConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t n = static_cast<std::size_t>(cfg_.resolution) + 1;
    grid_v_.assign(n * n, Vec2d{});
    grid_m_.assign(n * n, 0.0);
  }

  const MpmConfig& config() const { return cfg_; }
  std::vector<Particle>& particles() { return particles_; }
  const std::vector<Particle>& particles() const { return particles_; }
  std::uint64_t substep_count() const { return substeps_done_; }

  /// Adds an object from world-space points that sample its area.
  void add_object(const std::vector<Vec2d>& points, double area, Index object_id, Vec2d velocity = {}) {
    require(!points.empty() && area > 0, "add_object: empty object");
    const double vol = area / static_cast<double>(points.size());
    for (const auto& p : points) {
      require(p.x > cfg_.floor_coordinate() && p.x < 1 - cfg_.floor_coordinate() && p.y > cfg_.floor_coordinate() &&
                  p.y < 1 - cfg_.floor_coordinate(),
              "add_object: particle outside the simulation domain");
      Particle q;
      q.x = p;
      q.v = velocity;
      q.volume = vol;
      q.mass = vol * cfg_.density;
      q.object = object_id;
      particles_.push_back(q);
    }
  }

  /// One MLS-MPM substep.
  void substep() {
    const double dt = cfg_.substep_dt();
    const double dx = cfg_.dx(), inv_dx = 1.0 / dx;
    const int n = cfg_.resolution + 1;
    const double mu = cfg_.mu(), la = cfg_.lambda();
    std::fill(grid_v_.begin(), grid_v_.end(), Vec2d{});
    std::fill(grid_m_.begin(), grid_m_.end(), 0.0);

    // Particle to grid.
    for (const Particle& p : particles_) {
      const int bx = static_cast<int>(p.x.x * inv_dx - 0.5), by = static_cast<int>(p.x.y * inv_dx - 0.5);
      const Vec2d fx{p.x.x * inv_dx - bx, p.x.y * inv_dx - by};
      const auto wx = weights(fx.x), wy = weights(fx.y);
      const Mat2& F = p.deformation;
      const Mat2 R = polar_rotation(F);
      const double J = F.det();
      // Kirchhoff stress of fixed-corotated elasticity.
      const Mat2 tau = (F + R * -1.0) * F.transposed() * (2 * mu) + Mat2::identity() * (la * (J - 1) * J);
      const Mat2 stress = tau * (-dt * p.volume * 4 * inv_dx * inv_dx);
      const Mat2 affine = stress + p.affine * p.mass;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          const Vec2d dpos{(i - fx.x) * dx, (j - fx.y) * dx};
          const double w = wx[i] * wy[j];
          const std::size_t g = static_cast<std::size_t>((bx + i) * n + (by + j));
          grid_v_[g] += (p.v * p.mass + affine * dpos) * w;
          grid_m_[g] += w * p.mass;
        }
    }

    // Grid update.
    const int bound = cfg_.boundary_cells;
    const bool sticky = cfg_.boundary == "sticky";
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const std::size_t g = static_cast<std::size_t>(i * n + j);
        if (grid_m_[g] <= 0) continue;
        Vec2d v = grid_v_[g] * (1.0 / grid_m_[g]);
        v.y -= dt * cfg_.gravity;
        const bool wall_x = i < bound || i > n - 1 - bound;
        const bool wall_y = j < bound || j > n - 1 - bound;
        if (sticky && (wall_x || wall_y)) {
          v = {};
        } else {
          if ((i < bound && v.x < 0) || (i > n - 1 - bound && v.x > 0)) v.x = 0;
          if ((j < bound && v.y < 0) || (j > n - 1 - bound && v.y > 0)) v.y = 0;
        }
        grid_v_[g] = v;
      }

    // Grid to particle.
    const double lo = cfg_.floor_coordinate(), hi = 1.0 - cfg_.floor_coordinate();
    for (Particle& p : particles_) {
      const int bx = static_cast<int>(p.x.x * inv_dx - 0.5), by = static_cast<int>(p.x.y * inv_dx - 0.5);
      const Vec2d fx{p.x.x * inv_dx - bx, p.x.y * inv_dx - by};
      const auto wx = weights(fx.x), wy = weights(fx.y);
      Vec2d v{};
      Mat2 c{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          const Vec2d dpos{i - fx.x, j - fx.y};
          const double w = wx[i] * wy[j];
          const Vec2d gv = grid_v_[static_cast<std::size_t>((bx + i) * n + (by + j))];
          v += gv * w;
          c = c + Mat2{gv.x * dpos.x, gv.x * dpos.y, gv.y * dpos.x, gv.y * dpos.y} * (4 * inv_dx * w);
        }
      // Trapezoidal advection: exact for constant acceleration.
      p.x += (p.v + v) * (0.5 * dt);
      p.x.x = std::clamp(p.x.x, lo, hi);
      p.x.y = std::clamp(p.x.y, lo, hi);
      p.v = v;
      p.affine = c;
      p.deformation = (Mat2::identity() + c * dt) * p.deformation;
    }
    ++substeps_done_;
    check_finite();
  }

  void advance_frame() {
    for (int s = 0; s < cfg_.substeps; ++s) substep();
  }

  MassPointCloud snapshot() const {
    MassPointCloud c;
    c.positions.reserve(particles_.size());
    c.velocities.reserve(particles_.size());
    c.object_ids.reserve(particles_.size());
    for (const auto& p : particles_) {
      c.positions.emplace_back(static_cast<float>(p.x.x), static_cast<float>(p.x.y));
      c.velocities.emplace_back(static_cast<float>(p.v.x), static_cast<float>(p.v.y));
      c.object_ids.push_back(p.object);
    }
    return c;
  }

  double kinetic_energy() const {
    double e = 0;
    for (const auto& p : particles_) e += 0.5 * p.mass * squared_norm(p.v);
    return e;
  }

 private:
  static std::array<double, 3> weights(double f) {
    return {0.5 * (1.5 - f) * (1.5 - f), 0.75 - (f - 1) * (f - 1), 0.5 * (f - 0.5) * (f - 0.5)};
  }

  void check_finite() const {
    for (std::size_t i = 0; i < particles_.size(); ++i) {
      const auto& p = particles_[i];
      if (!is_finite(p.x) || !is_finite(p.v) || !p.deformation.finite() || !p.affine.finite())
        throw NumericalError("MPM instability: non-finite state at particle " + std::to_string(i) +
                             " after substep " + std::to_string(substeps_done_ + 1));
    }
  }

  MpmConfig cfg_;
  std::vector<Particle> particles_;
  std::vector<Vec2d> grid_v_;
  std::vector<double> grid_m_;
  std::uint64_t substeps_done_ = 0;
};

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

/// Placed object: world-space points and the area they represent.
struct PlacedObject {
  std::vector<Vec2d> points;
  double area = 0;
};

namespace detail {
inline double estimate_area(const Shape& s, double scale) {
  // Analytic where cheap; shoelace for polygons.
  if (s.family == "disk") return std::numbers::pi * 0.25 * scale * scale;
  if (s.family == "rounded_rect") {
    const double w = 2 * s.half_extent.x, h = 2 * s.half_extent.y, r = s.corner_radius;
    return (w * h - (4 - std::numbers::pi) * r * r) * scale * scale;
  }
  double a = 0;
  for (std::size_t i = 0, j = s.polygon.size() - 1; i < s.polygon.size(); j = i++)
    a += cross(s.polygon[j], s.polygon[i]);
  return std::abs(a) * 0.5 * scale * scale;
}

inline double min_distance(const std::vector<Vec2d>& a, const std::vector<Vec2d>& b) {
  double best = 1e300;
  for (const auto& p : a)
    for (const auto& q : b) best = std::min(best, squared_norm(p - q));
  return std::sqrt(best);
}
}  // namespace detail

/// True if some object touches the floor band or another object in `frame`.
inline bool has_contact(const MassPointCloud& frame, const MpmConfig& cfg) {
  const double touch = 0.5 * cfg.dx();
  const double floor_y = cfg.floor_coordinate();
  for (const auto& p : frame.positions)
    if (p.y - floor_y < touch) return true;
  const auto members = frame.object_members();
  for (std::size_t a = 0; a < members.size(); ++a)
    for (std::size_t b = a + 1; b < members.size(); ++b)
      for (Index i : members[a])
        for (Index j : members[b])
          if (norm(Vec2<float>(frame.positions[i] - frame.positions[j])) < touch) return true;
  return false;
}

/// Stacks `n_objects` randomly shaped, sized and rotated objects above the
/// floor with random gaps; rejects placements that overlap.
inline std::vector<PlacedObject> place_objects(std::uint64_t seed, std::size_t n_objects,
                                               std::size_t points_per_object, const MpmConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u(rng); };
  const double lo = cfg.floor_coordinate(), hi = 1.0 - cfg.floor_coordinate();

  for (int attempt = 0; attempt < cfg.placement_retries; ++attempt) {
    std::vector<PlacedObject> objects;
    double base_y = lo + uniform(cfg.floor_gap_min, cfg.floor_gap_max);
    double center_x = uniform(0.35, 0.65);
    bool ok = true;
    for (std::size_t k = 0; k < n_objects && ok; ++k) {
      const auto& family = cfg.shape_families[static_cast<std::size_t>(u(rng) * cfg.shape_families.size()) %
                                              cfg.shape_families.size()];
      const std::uint64_t shape_seed = rng();
      const Shape shape = make_shape(family, shape_seed, 5 + static_cast<int>(u(rng) * 4));
      const double size = uniform(cfg.object_size_min, cfg.object_size_max);
      const double angle = uniform(-std::numbers::pi, std::numbers::pi);
      auto local = fill_shape(shape, points_per_object, shape_seed);
      PlacedObject obj;
      obj.area = detail::estimate_area(shape, size);
      double min_y = 1e300;
      for (auto& p : local) {
        p = rotate(p * size, angle);
        min_y = std::min(min_y, p.y);
      }
      const double x = center_x + uniform(-cfg.horizontal_spread, cfg.horizontal_spread);
      for (auto& p : local) {
        p = p + Vec2d{x, base_y - min_y};
        if (p.x <= lo || p.x >= hi || p.y <= lo || p.y >= hi) ok = false;
      }
      double max_y = -1e300;
      for (const auto& p : local) max_y = std::max(max_y, p.y);
      base_y = max_y + uniform(cfg.stack_gap_min, cfg.stack_gap_max);
      for (const auto& other : objects)
        if (detail::min_distance(other.points, local) < cfg.stack_gap_min * 0.5) ok = false;
      obj.points = std::move(local);
      objects.push_back(std::move(obj));
    }
    if (ok) return objects;
  }
  throw ValidationError("place_objects: placement rejected " + std::to_string(cfg.placement_retries) +
                        " times; shrink objects or reduce n_objects");
}

inline std::string config_hash(const MpmConfig& cfg) {
  nlohmann::json j = cfg;
  return hash_string(j.dump());
}

/// Simulates one scene for `n_frames` frames (frame 0 is the initial state).
inline Trajectory simulate_scene(const std::vector<PlacedObject>& objects, std::size_t n_frames,
                                 const MpmConfig& cfg, std::uint64_t velocity_seed = 0) {
  require(n_frames >= 1, "simulate_scene: need at least one frame");
  MpmSolver solver(cfg);
  std::mt19937_64 rng(velocity_seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Index k = 0; k < objects.size(); ++k) {
    Vec2d v{};
    if (cfg.initial_speed_max > 0) v = Vec2d{u(rng), u(rng)} * cfg.initial_speed_max;
    solver.add_object(objects[k].points, objects[k].area, k, v);
  }
  Trajectory traj;
  traj.dt = cfg.frame_dt;
  traj.frames.push_back(solver.snapshot());
  for (std::size_t f = 1; f < n_frames; ++f) {
    solver.advance_frame();
    traj.frames.push_back(solver.snapshot());
  }
  return traj;
}

/// Generates a falling-objects trajectory. Scenes without any contact
/// within the horizon are regenerated from a derived seed.
inline Trajectory generate_trajectory(std::uint64_t seed, std::size_t n_objects, std::size_t points_per_object,
                                      std::size_t n_frames, const MpmConfig& cfg) {
  cfg.validate();
  require(n_objects >= 1, "generate_trajectory: n_objects must be >= 1");
  require(points_per_object >= 1, "generate_trajectory: points_per_object must be >= 1");
  for (int attempt = 0; attempt <= cfg.contact_retries; ++attempt) {
    const std::uint64_t scene_seed = seed + 0x632be59bd9b4e019ULL * static_cast<std::uint64_t>(attempt);
    const auto objects = place_objects(scene_seed, n_objects, points_per_object, cfg);
    Trajectory traj = simulate_scene(objects, n_frames, cfg, scene_seed ^ 0x5bd1e995ULL);
    bool contact = cfg.gravity == 0;  // static scenes are accepted as generated
    for (std::size_t f = 0; f < traj.n_frames() && !contact; ++f) contact = has_contact(traj.frames[f], cfg);
    if (!contact) continue;
    traj.provenance.generator = "mls-mpm";
    traj.provenance.config_hash = config_hash(cfg);
    traj.provenance.seed = seed;
    traj.provenance.content_hash = traj.content_hash();
    return traj;
  }
  throw ValidationError("generate_trajectory: no contact within the horizon after " +
                        std::to_string(cfg.contact_retries + 1) + " scenes; lower the drop heights");
}

}  // namespace eqcollide::mpm
