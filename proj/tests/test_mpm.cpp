// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "eqcollide/mpm.hpp"
#include "eqcollide/trajectory.hpp"

using namespace eqcollide;
using namespace eqcollide::mpm;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("eqcollide_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

Trajectory tiny_trajectory() {
  Trajectory t;
  t.dt = 0.002;
  for (int f = 0; f < 3; ++f) {
    MassPointCloud c;
    for (int i = 0; i < 10; ++i) {
      c.positions.emplace_back(0.1f * i + 0.01f * f, 0.5f - 0.003f * f);
      c.velocities.emplace_back(0.5f, -0.25f * f);
      c.object_ids.push_back(i < 5 ? 0 : 1);
    }
    t.frames.push_back(c);
  }
  t.provenance.seed = 3;
  return t;
}

}  // namespace

TEST(Shapes, SquareFillIsContained) {
  const auto pts = sample_shape(1, "square", 2000, 4);
  ASSERT_EQ(pts.size(), 2000u);
  for (const auto& p : pts) {
    EXPECT_GE(p.x, -0.5);
    EXPECT_LE(p.x, 0.5);
    EXPECT_GE(p.y, -0.5);
    EXPECT_LE(p.y, 0.5);
  }
}

TEST(Shapes, DeterministicPerSeed) {
  for (const char* fam : {"convex", "star", "rounded_rect", "disk"}) {
    EXPECT_EQ(sample_shape(42, fam, 300), sample_shape(42, fam, 300)) << fam;
    EXPECT_NE(sample_shape(42, fam, 300), sample_shape(43, fam, 300)) << fam;
  }
}

TEST(Shapes, UnknownFamilyRejected) { EXPECT_THROW(sample_shape(1, "blob", 10), ValidationError); }

TEST(Shapes, DiskAreaFromPointDensity) {
  // Density estimate: the fraction of points inside a box known to lie in
  // the disk scales the box area up to the full area.
  const auto pts = sample_shape(7, "disk", 40000);
  const double a = 0.25;
  std::size_t inside = 0;
  for (const auto& p : pts)
    if (std::abs(p.x) <= a && std::abs(p.y) <= a) ++inside;
  const double estimate = (4 * a * a) / (static_cast<double>(inside) / pts.size());
  const double exact = std::numbers::pi * 0.25;
  EXPECT_NEAR(estimate / exact, 1.0, 0.05);
}

TEST(Solver, IsolatedParticleFreeFall) {
  MpmConfig cfg;
  MpmSolver s(cfg);
  s.add_object({{0.5, 0.8}}, 1e-4, 0);
  const int frames = 20;
  for (int f = 0; f < frames; ++f) s.advance_frame();
  const double t = frames * cfg.frame_dt;
  EXPECT_NEAR(std::abs(s.particles()[0].v.y), cfg.gravity * t, 0.01 * cfg.gravity * t);
  EXPECT_NEAR(0.8 - s.particles()[0].x.y, 0.5 * cfg.gravity * t * t, 0.01 * 0.5 * cfg.gravity * t * t);
}

TEST(Solver, BlockAtRestWithoutGravityStaysPut) {
  MpmConfig cfg;
  cfg.gravity = 0;
  MpmSolver s(cfg);
  auto pts = sample_shape(3, "square", 400);
  for (auto& p : pts) p = p * 0.2 + Vec2d{0.5, 0.5};
  s.add_object(pts, 0.04, 0);
  const auto before = s.particles();
  for (int i = 0; i < 100; ++i) s.substep();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_NEAR(s.particles()[i].x.x, before[i].x.x, 1e-6);
    EXPECT_NEAR(s.particles()[i].x.y, before[i].x.y, 1e-6);
  }
  EXPECT_LT(s.kinetic_energy(), 1e-8);
}

TEST(Solver, FloorClampHolds) {
  MpmConfig cfg;
  MpmSolver s(cfg);
  const double floor_y = cfg.floor_coordinate();
  s.add_object({{0.5, floor_y + 0.002}}, 1e-4, 0, {0.0, -5.0});
  for (int i = 0; i < 50; ++i) {
    s.substep();
    EXPECT_GE(s.particles()[0].x.y, floor_y);
  }
}

TEST(Solver, CflViolationRejected) {
  MpmConfig cfg;
  cfg.substeps = 2;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Generate, ShapesAndBookkeeping) {
  MpmConfig cfg;
  const auto t = generate_trajectory(11, 2, 500, 60, cfg);
  EXPECT_EQ(t.n_points(), 1000u);
  EXPECT_EQ(t.n_frames(), 60u);
  EXPECT_EQ(t.n_frames() - 1, 59u);
  EXPECT_DOUBLE_EQ(t.dt, 0.002);
  const auto t3 = generate_trajectory(12, 3, 200, 5, cfg);
  std::vector<std::size_t> counts(3, 0);
  for (Index o : t3.frames[0].object_ids) ++counts.at(o);
  EXPECT_EQ(counts, (std::vector<std::size_t>{200, 200, 200}));
}

TEST(Generate, StaticsWithoutGravity) {
  MpmConfig cfg;
  cfg.gravity = 0;
  const auto t = generate_trajectory(5, 1, 300, 60, cfg);
  for (const auto& f : t.frames)
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_NEAR(f.positions[i].x, t.frames[0].positions[i].x, 1e-6);
      EXPECT_NEAR(f.positions[i].y, t.frames[0].positions[i].y, 1e-6);
    }
}

TEST(Generate, DeterministicAndInsideDomain) {
  MpmConfig cfg;
  const auto a = generate_trajectory(21, 2, 300, 60, cfg);
  const auto b = generate_trajectory(21, 2, 300, 60, cfg);
  EXPECT_EQ(a.content_hash(), b.content_hash());
  for (const auto& f : a.frames)
    for (const auto& p : f.positions) {
      EXPECT_GE(p.x, 0.f);
      EXPECT_LE(p.x, 1.f);
      EXPECT_GE(p.y, 0.f);
      EXPECT_LE(p.y, 1.f);
    }
}

TEST(TrajectoryIo, RoundTripIsBitExact) {
  const auto t = tiny_trajectory();
  const auto dir = temp_dir("roundtrip");
  write_trajectory(t, dir);
  const auto r = read_trajectory(dir);
  ASSERT_EQ(r.n_frames(), 3u);
  for (std::size_t f = 0; f < 3; ++f) {
    EXPECT_EQ(std::memcmp(r.frames[f].positions.data(), t.frames[f].positions.data(), 10 * sizeof(Vec2<float>)), 0);
    EXPECT_EQ(std::memcmp(r.frames[f].velocities.data(), t.frames[f].velocities.data(), 10 * sizeof(Vec2<float>)),
              0);
    EXPECT_EQ(r.frames[f].object_ids, t.frames[f].object_ids);
  }
  EXPECT_EQ(r.dt, t.dt);
  EXPECT_EQ(r.provenance.content_hash, t.content_hash());
}

TEST(TrajectoryIo, EditedPointCountIsShapeMismatch) {
  const auto dir = temp_dir("badmeta");
  write_trajectory(tiny_trajectory(), dir);
  auto meta = io_detail::read_json(dir / "meta.json");
  meta["n_points"] = 11;
  io_detail::write_json(dir / "meta.json", meta);
  try {
    read_trajectory(dir);
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos) << e.what();
  }
}

TEST(TrajectoryIo, VersionAndTruncationErrors) {
  const auto dir = temp_dir("version");
  write_trajectory(tiny_trajectory(), dir);
  std::filesystem::resize_file(dir / "velocities.f32", 40);
  EXPECT_THROW(read_trajectory(dir), FormatError);
  write_trajectory(tiny_trajectory(), dir);
  auto meta = io_detail::read_json(dir / "meta.json");
  meta["format_version"] = 2;
  io_detail::write_json(dir / "meta.json", meta);
  EXPECT_THROW(read_trajectory(dir), FormatError);
}

TEST(TrajectoryIo, GeneratedCorpusHashesMatchProvenance) {
  MpmConfig cfg;
  const auto root = temp_dir("corpus");
  for (int k = 0; k < 10; ++k) {
    const auto t = generate_trajectory(100 + k, 2, 60, 60, cfg);
    write_trajectory(t, root / std::to_string(k));
  }
  for (int k = 0; k < 10; ++k) {
    const auto r = read_trajectory(root / std::to_string(k));
    EXPECT_EQ(r.content_hash(), r.provenance.content_hash);
    EXPECT_EQ(r.provenance.seed, static_cast<std::uint64_t>(100 + k));
  }
}
