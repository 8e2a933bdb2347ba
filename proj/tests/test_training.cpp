// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "eqcollide/checkpoint.hpp"
#include "eqcollide/evaluation.hpp"
#include "eqcollide/training.hpp"
#include "support.hpp"

using namespace eqcollide;
using namespace testing_support;

namespace {

/// Blobs drifting and spinning rigidly; velocities are the exact time
/// derivative of the positions.
Trajectory drifting_blobs(std::uint64_t seed, std::size_t frames, std::size_t per_object = 24,
                          std::vector<Vec2<double>> centers = {{0.4, 0.45}, {0.6, 0.5}}) {
  std::mt19937_64 rng(seed);
  const auto c0 = blob_cloud<double>(rng, centers, per_object, 0.06, 0.3);
  Trajectory traj;
  traj.dt = 0.002;
  for (std::size_t t = 0; t < frames; ++t) {
    MassPointCloud f;
    f.object_ids = c0.object_ids;
    for (std::size_t i = 0; i < c0.size(); ++i) {
      const double s = t * traj.dt;
      f.positions.emplace_back(static_cast<float>(c0.positions[i].x + c0.velocities[i].x * s),
                               static_cast<float>(c0.positions[i].y + c0.velocities[i].y * s));
      f.velocities.emplace_back(static_cast<float>(c0.velocities[i].x), static_cast<float>(c0.velocities[i].y));
    }
    traj.frames.push_back(std::move(f));
  }
  return traj;
}

TrainConfig quick_train(int stage, std::size_t epochs) {
  TrainConfig t;
  t.stage = stage;
  t.epochs = epochs;
  t.batch_size = 2;
  t.window_length = 4;
  t.learning_rate = 3e-3;
  t.seed = 9;
  return t;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("eqcollide_test_training_" + name);
  std::filesystem::remove_all(p);
  return p;
}

template <class T>
bool same_parameters(const Model<T>& a, const Model<T>& b) {
  for (const auto& [name, p] : a.params().all())
    if (p.value.data != b.params().at(name).value.data) return false;
  return true;
}

}  // namespace

TEST(Losses, PointMseOracles) {
  std::vector<Vec2<float>> x{{0.1f, 0.2f}, {0.5f, 0.5f}, {0.9f, 0.3f}};
  auto off = [&](Vec2<float> d) {
    std::vector<Vec2<float>> y;
    for (const auto& p : x) y.push_back(p + d);
    return y;
  };
  EXPECT_NEAR(point_mse<float>(x, off({0.1f, 0.0f})), 0.01, 1e-8);
  EXPECT_NEAR(point_mse<float>(x, off({0.0f, 0.2f})), 0.04, 1e-8);
  EXPECT_NEAR(point_mse<float>(x, off({0.001f, 0.0f})), 1e-6, 1e-10);
  EXPECT_EQ(point_mse<float>(x, x), 0.0);
}

TEST(Losses, TapeMseMatchesValueMse) {
  std::mt19937_64 rng(1);
  auto a = random_tensor(rng, 7, 2), b = random_tensor(rng, 7, 2);
  ad::Tape<double> tape;
  const double got = tape.value(point_mse(tape, tape.constant(a), tape.constant(b))).data[0];
  double want = 0;
  for (std::size_t i = 0; i < a.size(); ++i) want += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  EXPECT_NEAR(got, want / 7, 1e-12);
}

TEST(Losses, DisplacementOracle) {
  std::vector<std::vector<Vec2<float>>> gt{{{0.f, 0.f}, {1.f, 1.f}}, {{0.5f, 0.5f}, {0.2f, 0.2f}}};
  auto pred = gt;
  EXPECT_EQ(displacement_loss(pred, gt), 0.0);
  for (auto& f : pred)
    for (auto& p : f) p.x += 0.1f;
  EXPECT_NEAR(displacement_loss(pred, gt), 0.01, 1e-8);
  pred[0] = gt[0];  // one of two frames exact
  EXPECT_NEAR(displacement_loss(pred, gt), 0.005, 1e-8);
}

TEST(Losses, ReconstructionOracle) {
  const auto traj = drifting_blobs(2, 5);
  VelocityFn<float> exact = [](const PointCloud<float>& f) { return f.velocities; };
  VelocityFn<float> shifted = [](const PointCloud<float>& f) {
    auto v = f.velocities;
    for (auto& x : v) x.y += 0.2f;
    return v;
  };
  VelocityFn<float> along_x = [](const PointCloud<float>& f) {
    auto v = f.velocities;
    for (auto& x : v) x.x += 0.1f;
    return v;
  };
  EXPECT_EQ(reconstruction_loss<float>(traj, exact), 0.0);
  EXPECT_NEAR(reconstruction_loss<float>(traj, shifted), 0.04, 1e-7);
  EXPECT_NEAR(reconstruction_loss<float>(traj, along_x), 0.01, 1e-7);
}

TEST(Losses, ReconstructionMatchesDoubleLoop) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  Trajectory traj = drifting_blobs(5, 3, 5, {{0.5, 0.5}});
  std::vector<std::vector<Vec2<float>>> fake;
  for (const auto& f : traj.frames) {
    std::vector<Vec2<float>> v;
    for (std::size_t i = 0; i < f.size(); ++i) v.emplace_back(static_cast<float>(u(rng)), static_cast<float>(u(rng)));
    fake.push_back(v);
  }
  std::size_t call = 0;
  VelocityFn<float> field = [&](const PointCloud<float>&) { return fake[call++]; };
  double want = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    double s = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      const double dx = double(traj.frames[t].velocities[i].x) - fake[t][i].x;
      const double dy = double(traj.frames[t].velocities[i].y) - fake[t][i].y;
      s += dx * dx + dy * dy;
    }
    want += s / 5 / 3;
  }
  EXPECT_NEAR(reconstruction_loss<float>(traj, field), want, 1e-7);
}

TEST(Windows, NonOverlappingAndSkipsShortTrajectories) {
  std::vector<Trajectory> data{drifting_blobs(1, 45, 4), drifting_blobs(2, 10, 4), drifting_blobs(3, 20, 4)};
  const auto w = make_windows(data, 20, 20);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w[0].trajectory, 0u);
  EXPECT_EQ(w[0].begin, 0u);
  EXPECT_EQ(w[1].begin, 20u);
  EXPECT_EQ(w[2].trajectory, 2u);
  EXPECT_EQ(make_windows(data, 5, 2).size(), 21u + 3u + 8u);
}

TEST(Training, SelfGeneratedDataGivesZeroDisplacement) {
  Model<float> model(micro_config());
  const auto start = drifting_blobs(3, 1);
  const std::size_t L = 5;
  const auto roll = rollout(model, start.frames[0], L, start.dt);
  // Frame k keeps the rolled-out positions and, from k = 1 on, the field the
  // model evaluates at step k, so only the frame-0 velocity term remains.
  Trajectory traj = roll;
  traj.frames.resize(L);
  for (std::size_t k = 1; k < L; ++k) traj.frames[k].velocities = roll.frames[k + 1].velocities;
  ad::Tape<float> tape(false);
  auto obj = stage2_objective(tape, model, traj, Window{0, 0, L}, 1.0, 1.0);
  EXPECT_EQ(tape.value(obj.dis).data[0], 0.0f);
  const double first = point_mse<float>(roll.frames[1].velocities, start.frames[0].velocities);
  EXPECT_NEAR(tape.value(obj.recons).data[0], first / (L - 1), 1e-6 * first);
}

TEST(Training, Stage2GradientMatchesFiniteDifferences) {
  const auto traj = drifting_blobs(4, 3, 64);
  const ModelConfig cfg = micro_config();
  Model<double> model(cfg);
  const Window w{0, 0, 3};
  auto loss = [&]() {
    ad::Tape<double> tape(false);
    return tape.value(stage2_objective(tape, model, traj, w, 1.0, 1.0).total).data[0];
  };
  model.params().zero_grad();
  {
    ad::Tape<double> tape;
    auto obj = stage2_objective(tape, model, traj, w, 1.0, 1.0);
    tape.backward(obj.total);
  }
  std::size_t checked = 0;
  for (auto& [name, p] : model.params().all()) {
    for (std::size_t i = 0; i < std::min<std::size_t>(2, p.value.size()); ++i) {
      const double g = p.grad.data[i];
      const double keep = p.value.data[i];
      const double h = 1e-6;
      p.value.data[i] = keep + h;
      const double up = loss();
      p.value.data[i] = keep - h;
      const double dn = loss();
      p.value.data[i] = keep;
      const double fd = (up - dn) / (2 * h);
      const double scale = std::max({std::abs(fd), std::abs(g), 1e-6});
      EXPECT_LE(std::abs(fd - g) / scale, 1e-3) << name << "[" << i << "] tape " << g << " fd " << fd;
      ++checked;
    }
  }
  EXPECT_GT(checked, 40u);
  for (const char* group : {"encoder.", "decoder.", "processor."}) EXPECT_GT(model.params().grad_norm(group), 0.0);
}

TEST(Training, StaticAdjacencyLeavesInterKernelsWithoutGradient) {
  std::vector<Vec2<double>> close{{0.45, 0.5}, {0.55, 0.5}};
  const auto traj = drifting_blobs(5, 3, 12, close);
  ModelConfig cfg = micro_config();
  cfg.static_adjacency = true;
  Model<float> model(cfg);
  model.params().zero_grad();
  ad::Tape<float> tape;
  tape.backward(stage2_objective(tape, model, traj, Window{0, 0, 3}, 1.0, 1.0).total);
  EXPECT_EQ(model.params().grad_norm("processor.basis_inter"), 0.0);
  for (std::size_t l = 0; l < cfg.processor.layers; ++l)
    EXPECT_EQ(model.params().grad_norm("processor.layer" + std::to_string(l) + ".kernel_inter"), 0.0);
  EXPECT_GT(model.params().grad_norm("processor.basis_inner"), 0.0);
}

TEST(Training, ZeroEpochsIsANoOp) {
  std::vector<Trajectory> data{drifting_blobs(6, 8)};
  Model<float> a(micro_config()), b(micro_config());
  auto state = train(a, data, quick_train(1, 0));
  EXPECT_TRUE(state.history.empty());
  EXPECT_EQ(state.adam_step, 0u);
  EXPECT_TRUE(same_parameters(a, b));
}

TEST(Training, DeterministicForFixedSeeds) {
  std::vector<Trajectory> data{drifting_blobs(7, 9), drifting_blobs(8, 9)};
  Model<float> a(micro_config()), b(micro_config());
  auto sa = train(a, data, quick_train(2, 2));
  auto sb = train(b, data, quick_train(2, 2));
  ASSERT_EQ(sa.history.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(sa.history[e].total, sb.history[e].total);
  EXPECT_TRUE(same_parameters(a, b));
}

TEST(Training, Stage1LossDecreases) {
  std::vector<Trajectory> data{drifting_blobs(9, 8), drifting_blobs(10, 8)};
  Model<float> model(micro_config());
  auto cfg = quick_train(1, 25);
  cfg.learning_rate = 1e-2;
  auto s = train(model, data, cfg);
  EXPECT_LT(s.history.back().total, 0.5 * s.history.front().total);
}

TEST(Training, NonFiniteLossIsReported) {
  std::vector<Trajectory> data{drifting_blobs(11, 4)};
  // Frame 1 only serves as a stage-2 target, so the NaN reaches the loss.
  data[0].frames[1].positions[3].x = std::numeric_limits<float>::quiet_NaN();
  Model<float> model(micro_config());
  try {
    train(model, data, quick_train(2, 1));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
}

TEST(Training, RejectsDatasetWithoutFullWindow) {
  std::vector<Trajectory> data{drifting_blobs(12, 3)};
  Model<float> model(micro_config());
  EXPECT_THROW(train(model, data, quick_train(1, 1)), ValidationError);
}

TEST(TrainConfigJson, RoundTripAndUnknownKeys) {
  TrainConfig c = quick_train(2, 17);
  c.finetune_fraction = 0.25;
  const nlohmann::json j = c;
  const auto back = train_config_from_json(j);
  EXPECT_EQ(config_hash(back), config_hash(c));
  nlohmann::json bad = j;
  bad["learning_rat"] = 1;
  try {
    train_config_from_json(bad);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("train.learning_rat"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripRestoresParametersAndState) {
  std::vector<Trajectory> data{drifting_blobs(13, 8)};
  Model<float> a(micro_config());
  const auto cfg = quick_train(1, 2);
  auto state = train(a, data, cfg);
  const auto dir = scratch("roundtrip");
  save_checkpoint(dir, a, cfg, state);
  Model<float> b(micro_config());
  auto c = load_checkpoint(dir, b);
  EXPECT_TRUE(same_parameters(a, b));
  EXPECT_EQ(c.state.epoch, 2u);
  EXPECT_EQ(c.state.adam_step, state.adam_step);
  EXPECT_EQ(c.state.history.size(), 2u);
  for (const auto& [name, p] : a.params().all()) EXPECT_EQ(p.adam_v.data, b.params().at(name).adam_v.data) << name;
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  std::vector<Trajectory> data{drifting_blobs(14, 8), drifting_blobs(15, 8)};
  const auto cfg = quick_train(2, 4);
  Model<float> straight(micro_config());
  auto full = train(straight, data, cfg);

  const auto dir = scratch("resume");
  Model<float> first(micro_config());
  struct Interrupt {};
  EXPECT_THROW(train(first, data, cfg, TrainState{2, 0, 0, {}},
                     [&](const LossRecord& r, const TrainState& s) {
                       save_checkpoint(dir, first, cfg, s);
                       if (r.epoch == 1) throw Interrupt{};
                     }),
               Interrupt);

  Model<float> resumed(micro_config());
  auto c = load_checkpoint(dir, resumed);
  require_resumable(c, cfg);
  EXPECT_EQ(c.state.epoch, 2u);
  auto rest = train(resumed, data, cfg, c.state);
  EXPECT_TRUE(same_parameters(straight, resumed));
  ASSERT_EQ(rest.history.size(), 4u);
  EXPECT_EQ(rest.history[3].total, full.history[3].total);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MismatchesAreFormatErrors) {
  std::vector<Trajectory> data{drifting_blobs(16, 8)};
  Model<float> a(micro_config());
  const auto cfg = quick_train(1, 1);
  auto state = train(a, data, cfg);
  const auto dir = scratch("mismatch");
  save_checkpoint(dir, a, cfg, state);

  ModelConfig other = micro_config();
  other.processor.layers = 3;
  Model<float> b(other);
  EXPECT_THROW(load_checkpoint(dir, b), FormatError);

  auto c = read_checkpoint_manifest(dir);
  auto changed = cfg;
  changed.learning_rate *= 2;
  EXPECT_THROW(require_resumable(c, changed), FormatError);

  {
    const auto f = dir / "params" / "processor.readout.weight.f32";
    ASSERT_TRUE(std::filesystem::exists(f));
    std::fstream io(f, std::ios::in | std::ios::out | std::ios::binary);
    const float junk = 123.0f;
    io.write(reinterpret_cast<const char*>(&junk), sizeof junk);
  }
  Model<float> d(micro_config());
  EXPECT_THROW(load_checkpoint(dir, d), FormatError);

  std::filesystem::remove(dir / "params" / "processor.readout.weight.f32");
  EXPECT_THROW(load_checkpoint(dir, d), FormatError);
  EXPECT_THROW(read_checkpoint_manifest(dir / "nope"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(LossCsv, HeaderAndRows) {
  std::vector<LossRecord> h{{0, 1, 0.5, 0.25, 0.75, 1.5}};
  const auto csv = loss_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,stage,L_dis,L_recons,total,wall_seconds");
  EXPECT_NE(csv.find("0,1,5.000000000e-01,2.500000000e-01,7.500000000e-01,1.500"), std::string::npos);
}
