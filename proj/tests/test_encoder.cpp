// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "eqcollide/model.hpp"
#include "support.hpp"

using namespace eqcollide;
using namespace testing_support;

namespace {

std::vector<Vec2<float>> shifted(const std::vector<Vec2<float>>& pts, Vec2<float> t) {
  std::vector<Vec2<float>> out;
  for (const auto& p : pts) out.push_back(p + t);
  return out;
}

}  // namespace

TEST(Encoder, FullSampleCountKeepsEveryPoint) {
  std::mt19937_64 rng(1);
  auto cloud = blob_cloud<float>(rng, {{0.5, 0.5}}, 40);
  ModelConfig cfg = small_config();
  cfg.encoder.samples[0] = 40;
  Model<float> model(cfg);
  ad::Tape<float> tape(false);
  auto sa = model.encoder().set_abstraction(tape, cloud.positions, cloud.velocities, {}, 0);
  auto idx = sa.indices;
  std::sort(idx.begin(), idx.end());
  std::vector<Index> all(40);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(idx, all);
  for (std::size_t c = 0; c < sa.indices.size(); ++c) EXPECT_EQ(sa.points[c], cloud.positions[sa.indices[c]]);
}

TEST(Encoder, SetAbstractionTranslationInvariance) {
  std::mt19937_64 rng(2);
  auto cloud = blob_cloud<float>(rng, {{0.4, 0.4}}, 120);
  Model<float> model(small_config(GroupVariant::translation));
  const Vec2<float> t{0.3f, 0.1f};
  ad::Tape<float> tape(false);
  auto a = model.encoder().set_abstraction(tape, cloud.positions, cloud.velocities, {}, 0);
  auto moved = shifted(cloud.positions, t);
  auto b = model.encoder().set_abstraction(tape, moved, cloud.velocities, {}, 0);
  EXPECT_EQ(a.indices, b.indices);
  EXPECT_LE(max_abs_diff(tape.value(a.features), tape.value(b.features)), 1e-5);
  for (std::size_t c = 0; c < a.points.size(); ++c) {
    EXPECT_NEAR(b.points[c].x, a.points[c].x + t.x, 1e-6);
    EXPECT_NEAR(b.points[c].y, a.points[c].y + t.y, 1e-6);
  }
}

TEST(Encoder, SetAbstractionRotationInvariance) {
  std::mt19937_64 rng(3);
  Model<float> model(small_config(GroupVariant::se2));
  for (int trial = 0; trial < 10; ++trial) {
    auto cloud = blob_cloud<float>(rng, {{0.5, 0.5}}, 100);
    auto g = random_group_element<float>(rng, true);
    auto moved = cloud.transformed(g);
    ad::Tape<float> tape(false);
    auto a = model.encoder().set_abstraction(tape, cloud.positions, cloud.velocities, {}, 0);
    auto b = model.encoder().set_abstraction(tape, moved.positions, moved.velocities, {}, 0);
    ASSERT_EQ(a.indices, b.indices);
    EXPECT_LE(max_abs_diff(tape.value(a.features), tape.value(b.features)), 1e-5);
  }
}

TEST(Encoder, DefaultConfigShapes) {
  std::mt19937_64 rng(4);
  auto cloud = blob_cloud<float>(rng, {{0.3, 0.3}, {0.6, 0.6}}, 500);
  Model<float> model(ModelConfig{});
  auto z = model.encode(cloud);
  EXPECT_EQ(z.size(), 32u);
  EXPECT_EQ(z.contexts.rows, 32u);
  EXPECT_EQ(z.contexts.cols, 32u);
  for (Index i = 0; i < 32; ++i) EXPECT_EQ(z.object_ids[i], i < 16 ? 0u : 1u);
}

TEST(Encoder, LatentBookkeeping) {
  std::mt19937_64 rng(5);
  auto cloud = blob_cloud<float>(rng, {{0.3, 0.3}, {0.6, 0.6}, {0.3, 0.7}}, 90);
  Model<float> model(small_config());
  auto z = model.encode(cloud);
  ASSERT_EQ(z.size(), 24u);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const Index s = z.source_indices[i];
    EXPECT_EQ(cloud.object_ids[s], z.object_ids[i]);
    EXPECT_EQ(z.poses[i].position, cloud.positions[s]);
    EXPECT_EQ(z.poses[i].orientation, heading(cloud.velocities[s]));
  }
  for (float c : z.contexts.data) EXPECT_TRUE(std::isfinite(c));
}

TEST(Encoder, ClampsSampleCountsForSmallObjects) {
  std::mt19937_64 rng(6);
  auto cloud = blob_cloud<float>(rng, {{0.5, 0.5}}, 5);
  Model<float> model(small_config());
  auto z = model.encode(cloud);
  EXPECT_EQ(z.size(), 5u);
}

TEST(Encoder, RestingPointsFaceAwayFromCentroid) {
  std::mt19937_64 rng(7);
  auto cloud = blob_cloud<float>(rng, {{0.3, 0.3}, {0.6, 0.6}}, 80);
  for (auto& v : cloud.velocities) v = {};
  Model<float> model(small_config());
  const auto z = model.encode(cloud);
  for (std::size_t i = 0; i < z.size(); ++i) {
    Vec2<double> c{};
    double n = 0;
    for (std::size_t k = 0; k < cloud.size(); ++k)
      if (cloud.object_ids[k] == z.object_ids[i]) {
        c = c + Vec2<double>(cloud.positions[k]);
        n += 1;
      }
    const Vec2<double> away = Vec2<double>(z.poses[i].position) - c * (1.0 / n);
    EXPECT_NEAR(wrap_angle(z.poses[i].orientation - std::atan2(away.y, away.x)), 0.0, 1e-5);
  }
  // and the orientation rotates with the scene
  const GroupElement<float> g{1.1f, {0.05f, -0.02f}};
  const auto zg = model.encode(cloud.transformed(g));
  for (std::size_t i = 0; i < z.size(); ++i)
    EXPECT_NEAR(wrap_angle(zg.poses[i].orientation - z.poses[i].orientation - 1.1f), 0.0f, 1e-4);
}

TEST(Encoder, EquivariantUnderGroupActions) {
  std::mt19937_64 rng(8);
  for (GroupVariant gv : {GroupVariant::se2, GroupVariant::translation}) {
    Model<float> model(small_config(gv));
    for (int trial = 0; trial < 10; ++trial) {
      auto cloud = blob_cloud<float>(rng, {{0.35, 0.4}, {0.55, 0.5}}, 150);
      auto g = random_group_element<float>(rng, gv == GroupVariant::se2);
      auto a = model.encode(cloud).transformed(g);
      auto b = model.encode(cloud.transformed(g));
      ASSERT_EQ(a.source_indices, b.source_indices);
      for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(a.poses[i].position.x, b.poses[i].position.x, 1e-5);
        EXPECT_NEAR(a.poses[i].position.y, b.poses[i].position.y, 1e-5);
        EXPECT_NEAR(wrap_angle(a.poses[i].orientation - b.poses[i].orientation), 0.0f, 1e-4);
      }
      EXPECT_LE(max_abs_diff(a.contexts, b.contexts), 1e-5);
    }
  }
}

TEST(Encoder, ObjectBlocksPermuteWithInput) {
  std::mt19937_64 rng(9);
  auto cloud = blob_cloud<float>(rng, {{0.3, 0.3}, {0.6, 0.6}}, 70);
  auto swapped = cloud.select_objects({1, 0});
  Model<float> model(small_config());
  auto a = model.encode(cloud), b = model.encode(swapped);
  const std::size_t m0 = a.size() / 2;
  for (std::size_t i = 0; i < m0; ++i) {
    EXPECT_EQ(a.poses[i].position, b.poses[i + m0].position);
    EXPECT_EQ(a.poses[i + m0].position, b.poses[i].position);
    for (std::size_t c = 0; c < a.contexts.cols; ++c) {
      EXPECT_EQ(a.contexts(i, c), b.contexts(i + m0, c));
      EXPECT_EQ(a.contexts(i + m0, c), b.contexts(i, c));
    }
  }
}

TEST(Encoder, RejectsMissingObject) {
  std::mt19937_64 rng(10);
  auto cloud = blob_cloud<float>(rng, {{0.3, 0.3}, {0.6, 0.6}}, 20);
  for (auto& o : cloud.object_ids) o = o == 0 ? 2 : o;  // ids {1, 2}: object 0 is empty
  Model<float> model(small_config());
  EXPECT_THROW(model.encode(cloud), ValidationError);
}

// Free fall: every point shares one velocity up to tiny deformations, so
// vF - vQ is dominated by rounding once the cloud is rotated.
TEST(Encoder, CoMovingCloudStaysInvariant) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> jitter(-1e-6, 1e-6);
  Model<float> model(small_config(GroupVariant::se2));
  for (int trial = 0; trial < 10; ++trial) {
    auto cloud = blob_cloud<float>(rng, {{0.4, 0.45}, {0.58, 0.5}}, 120);
    for (auto& v : cloud.velocities)
      v = {static_cast<float>(jitter(rng)), static_cast<float>(-0.3 + jitter(rng))};
    const auto g = random_group_element<float>(rng, true);
    EXPECT_LE(max_abs_diff(model.encode(cloud).contexts, model.encode(cloud.transformed(g)).contexts), 1e-5);
  }
}
