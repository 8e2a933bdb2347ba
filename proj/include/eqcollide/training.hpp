// SPDX-License-Identifier: Apache-2.0
//
// Losses and the two training stages. Stage 1 fits encoder and decoder to
// reconstruct velocities frame by frame; stage 2 encodes once per window,
// unrolls the Euler step, and backpropagates through the whole unroll.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqcollide/autodiff.hpp"
#include "eqcollide/hash.hpp"
#include "eqcollide/json_section.hpp"
#include "eqcollide/model.hpp"
#include "eqcollide/nn.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide {

struct TrainConfig {
  int stage = 1;
  std::size_t epochs = 2000;
  std::size_t batch_size = 16;  // windows per optimizer step
  double learning_rate = 1e-3;
  std::string schedule = "cosine";  // "cosine" or "constant"
  double clip_norm = 1.0;
  double c1 = 1.0;  // displacement weight
  double c2 = 1.0;  // reconstruction weight
  std::size_t window_length = 20;
  std::size_t window_stride = 0;  // 0 means window_length
  std::uint64_t seed = 0;
  std::size_t stage1_frames = 0;  // frames drawn per window and epoch in stage 1, 0 = all
  std::size_t query_points = 0;   // stage-1 query subsample per frame, 0 = all
  double finetune_fraction = 1.0;  // share of the training set used

  std::size_t stride() const { return window_stride == 0 ? window_length : window_stride; }

  void validate() const {
    require(stage == 1 || stage == 2, "train.stage must be 1 or 2");
    require(batch_size >= 1, "train.batch_size must be >= 1");
    require(learning_rate > 0, "train.learning_rate must be positive");
    require(schedule == "cosine" || schedule == "constant", "train.schedule must be 'cosine' or 'constant'");
    require(clip_norm >= 0, "train.clip_norm must be >= 0");
    require(c1 >= 0 && c2 >= 0, "train.c1 and train.c2 must be >= 0");
    require(window_length >= 2, "train.window_length must be >= 2");
    require(finetune_fraction > 0 && finetune_fraction <= 1, "train.finetune_fraction must be in (0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", c.stage},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"schedule", c.schedule},
       {"clip_norm", c.clip_norm},
       {"c1", c.c1},
       {"c2", c.c2},
       {"window_length", c.window_length},
       {"window_stride", c.window_stride},
       {"seed", c.seed},
       {"stage1_frames", c.stage1_frames},
       {"query_points", c.query_points},
       {"finetune_fraction", c.finetune_fraction}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train") {
  TrainConfig c;
  JsonSection s(j, path);
  s.get("stage", c.stage)
      .get("epochs", c.epochs)
      .get("batch_size", c.batch_size)
      .get("learning_rate", c.learning_rate)
      .get("schedule", c.schedule)
      .get("clip_norm", c.clip_norm)
      .get("c1", c.c1)
      .get("c2", c.c2)
      .get("window_length", c.window_length)
      .get("window_stride", c.window_stride)
      .get("seed", c.seed)
      .get("stage1_frames", c.stage1_frames)
      .get("query_points", c.query_points)
      .get("finetune_fraction", c.finetune_fraction);
  s.finish();
  return c;
}

inline std::string config_hash(const TrainConfig& c) { return hash_string(nlohmann::json(c).dump()); }

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over points of the squared Euclidean error, on the tape.
template <class T>
ad::Var point_mse(ad::Tape<T>& tape, ad::Var pred, ad::Var target) {
  const std::size_t n = tape.rows(pred);
  return ad::scale(tape, ad::sum_all(tape, ad::square(tape, ad::sub(tape, pred, target))),
                   static_cast<T>(1.0 / static_cast<double>(n)));
}

/// Mean over points of |a - b|^2, accumulated in double.
template <class T>
double point_mse(std::span<const Vec2<T>> a, std::span<const Vec2<T>> b) {
  require(a.size() == b.size() && !a.empty(), "point_mse: shapes differ or are empty");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = static_cast<double>(a[i].x) - b[i].x, dy = static_cast<double>(a[i].y) - b[i].y;
    s += dx * dx + dy * dy;
  }
  return s / static_cast<double>(a.size());
}

/// Mean over frames of point_mse between predicted and true positions.
inline double displacement_loss(const std::vector<std::vector<Vec2<float>>>& pred,
                                const std::vector<std::vector<Vec2<float>>>& gt) {
  require(pred.size() == gt.size() && !pred.empty(), "displacement_loss: frame counts differ or are empty");
  double s = 0;
  for (std::size_t t = 0; t < pred.size(); ++t)
    s += point_mse<float>(pred[t], gt[t]);
  return s / static_cast<double>(pred.size());
}

/// Field used by reconstruction_loss: velocities at a frame's positions.
template <class T>
using VelocityFn = std::function<std::vector<Vec2<T>>(const PointCloud<T>& frame)>;

/// Mean over frames of point_mse(v_t, f(x_t; z_t)) with z_t encoded from
/// each frame.
template <class T>
double reconstruction_loss(const Trajectory& traj, const VelocityFn<T>& field) {
  require(traj.n_frames() >= 1, "reconstruction_loss: empty trajectory");
  double s = 0;
  for (const auto& f : traj.frames) {
    const PointCloud<T> frame = f.template cast<T>();
    const auto v = field(frame);
    s += point_mse<T>(frame.velocities, v);
  }
  return s / static_cast<double>(traj.n_frames());
}

template <class T>
double reconstruction_loss(const Trajectory& traj, const Model<T>& model) {
  return reconstruction_loss<T>(traj, [&model](const PointCloud<T>& frame) {
    return model.decoder().decode(frame.positions, model.encode(frame));
  });
}

// ---------------------------------------------------------------------------
// Windows and per-window objectives
// ---------------------------------------------------------------------------

struct Window {
  std::size_t trajectory = 0;
  std::size_t begin = 0;
  std::size_t length = 0;
};

/// Non-overlapping (by default) windows of window_length frames.
inline std::vector<Window> make_windows(const std::vector<Trajectory>& data, std::size_t length, std::size_t stride) {
  require(length >= 2 && stride >= 1, "make_windows: bad window length or stride");
  std::vector<Window> out;
  for (std::size_t k = 0; k < data.size(); ++k)
    for (std::size_t b = 0; b + length <= data[k].n_frames(); b += stride) out.push_back({k, b, length});
  return out;
}

struct LossTerms {
  double dis = 0;
  double recons = 0;
  double total = 0;
};

template <class T>
struct WindowObjective {
  ad::Var total;
  ad::Var dis;
  ad::Var recons;
};

template <class T>
ad::Var cloud_positions(ad::Tape<T>& tape, const MassPointCloud& f) {
  ad::Tensor<T> t(f.size(), 2);
  for (std::size_t i = 0; i < f.size(); ++i) {
    t(i, 0) = static_cast<T>(f.positions[i].x);
    t(i, 1) = static_cast<T>(f.positions[i].y);
  }
  return tape.constant(std::move(t));
}

template <class T>
ad::Var cloud_velocities(ad::Tape<T>& tape, const MassPointCloud& f) {
  ad::Tensor<T> t(f.size(), 2);
  for (std::size_t i = 0; i < f.size(); ++i) {
    t(i, 0) = static_cast<T>(f.velocities[i].x);
    t(i, 1) = static_cast<T>(f.velocities[i].y);
  }
  return tape.constant(std::move(t));
}

/// Stage-1 objective on the given frames: each frame is encoded and its
/// velocities reconstructed at `queries` (all points when empty).
template <class T>
WindowObjective<T> stage1_objective(ad::Tape<T>& tape, const Model<T>& model, const Trajectory& traj,
                                    const std::vector<std::size_t>& frames, const std::vector<Index>& queries) {
  std::vector<ad::Var> terms;
  for (std::size_t f : frames) {
    const auto& fr = traj.frames[f];
    LatentVars z = model.encode(tape, fr.template cast<T>());
    ad::Var x = cloud_positions<T>(tape, fr), v = cloud_velocities<T>(tape, fr);
    if (!queries.empty()) {
      x = ad::gather_rows(tape, x, queries);
      v = ad::gather_rows(tape, v, queries);
    }
    terms.push_back(point_mse(tape, model.decode(tape, x, z), v));
  }
  ad::Var recons = ad::scale(tape, ad::sum_all(tape, ad::concat_cols(tape, terms)),
                             static_cast<T>(1.0 / static_cast<double>(terms.size())));
  return {recons, tape.constant(ad::Tensor<T>(1, 1)), recons};
}

/// Stage-2 objective: encode frame `begin`, unroll length-1 steps, and
/// combine c1 * L_dis + c2 * L_recons.
template <class T>
WindowObjective<T> stage2_objective(ad::Tape<T>& tape, const Model<T>& model, const Trajectory& traj,
                                    const Window& w, double c1, double c2) {
  const auto& f0 = traj.frames[w.begin];
  LatentVars z = model.encode(tape, f0.template cast<T>());
  ad::Var x = cloud_positions<T>(tape, f0);
  ad::Var v = cloud_velocities<T>(tape, f0);
  std::vector<ad::Var> dis, rec;
  for (std::size_t t = 0; t + 1 < w.length; ++t) {
    const auto& cur = traj.frames[w.begin + t];
    const auto& nxt = traj.frames[w.begin + t + 1];
    auto s = model.step(tape, x, v, z, f0.object_ids, traj.dt);
    rec.push_back(point_mse(tape, s.velocities, cloud_velocities<T>(tape, cur)));
    dis.push_back(point_mse(tape, s.positions, cloud_positions<T>(tape, nxt)));
    x = s.positions;
    v = s.velocities;
    z = s.z;
  }
  const T inv = static_cast<T>(1.0 / static_cast<double>(dis.size()));
  ad::Var l_dis = ad::scale(tape, ad::sum_all(tape, ad::concat_cols(tape, dis)), inv);
  ad::Var l_rec = ad::scale(tape, ad::sum_all(tape, ad::concat_cols(tape, rec)), inv);
  ad::Var total = ad::add(tape, ad::scale(tape, l_dis, static_cast<T>(c1)), ad::scale(tape, l_rec, static_cast<T>(c2)));
  return {total, l_dis, l_rec};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossRecord {
  std::size_t epoch = 0;
  int stage = 1;
  double l_dis = 0;
  double l_recons = 0;
  double total = 0;
  double wall_seconds = 0;
};

struct TrainState {
  int stage = 1;
  std::size_t epoch = 0;          // completed epochs
  std::uint64_t adam_step = 0;    // optimizer steps taken
  std::vector<LossRecord> history;
};

/// Trajectories used for training: the leading share given by
/// finetune_fraction (at least one).
inline std::vector<Trajectory> training_subset(const std::vector<Trajectory>& data, double fraction) {
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * data.size() - 1e-9)));
  return std::vector<Trajectory>(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(std::min(n, data.size())));
}

/// Called after every epoch with the updated state; may save a checkpoint.
using EpochCallback = std::function<void(const LossRecord&, const TrainState&)>;

/// Runs epochs [state.epoch, cfg.epochs) of cfg.stage. The RNG of each epoch
/// is derived from (seed, epoch), so resuming from a saved state replays
/// an uninterrupted run.
template <class T>
TrainState train(Model<T>& model, const std::vector<Trajectory>& dataset, const TrainConfig& cfg, TrainState state = {},
                 const EpochCallback& on_epoch = {}) {
  cfg.validate();
  require(!dataset.empty(), "train: empty dataset");
  const auto data = training_subset(dataset, cfg.finetune_fraction);
  const auto windows = make_windows(data, cfg.window_length, cfg.stride());
  require(!windows.empty(), "train: no trajectory holds a full window of " + std::to_string(cfg.window_length) +
                                " frames");
  if (state.stage != cfg.stage) {
    state.stage = cfg.stage;
    state.epoch = 0;
    state.adam_step = 0;
    for (auto& [_, p] : model.params().all()) p.reset_state();
  }
  const std::size_t steps_per_epoch = (windows.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total_steps = static_cast<std::uint64_t>(steps_per_epoch * cfg.epochs);
  const auto t0 = std::chrono::steady_clock::now();
  const double wall_offset = state.history.empty() ? 0.0 : state.history.back().wall_seconds;
  bool groups_checked = false;

  for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + epoch * 0xbf58476d1ce4e5b9ULL + cfg.stage);
    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    LossTerms sum;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      model.params().zero_grad();
      const T inv_batch = static_cast<T>(1.0 / static_cast<double>(b1 - b0));
      for (std::size_t b = b0; b < b1; ++b) {
        const Window& w = windows[order[b]];
        const Trajectory& traj = data[w.trajectory];
        ad::Tape<T> tape;
        WindowObjective<T> obj;
        if (cfg.stage == 1) {
          std::vector<std::size_t> frames(w.length);
          std::iota(frames.begin(), frames.end(), w.begin);
          if (cfg.stage1_frames > 0 && cfg.stage1_frames < frames.size()) {
            std::shuffle(frames.begin(), frames.end(), rng);
            frames.resize(cfg.stage1_frames);
            std::sort(frames.begin(), frames.end());
          }
          std::vector<Index> queries;
          const std::size_t np = traj.n_points();
          if (cfg.query_points > 0 && cfg.query_points < np) {
            std::vector<Index> all(np);
            std::iota(all.begin(), all.end(), 0);
            std::shuffle(all.begin(), all.end(), rng);
            queries.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.query_points));
            std::sort(queries.begin(), queries.end());
          }
          obj = stage1_objective(tape, model, traj, frames, queries);
        } else {
          obj = stage2_objective(tape, model, traj, w, cfg.c1, cfg.c2);
        }
        const double total = static_cast<double>(tape.value(obj.total).data[0]);
        if (!std::isfinite(total))
          throw NumericalError("train: non-finite loss at stage " + std::to_string(cfg.stage) + ", epoch " +
                               std::to_string(epoch) + ", trajectory " + std::to_string(w.trajectory) +
                               ", window start " + std::to_string(w.begin));
        sum.total += total;
        sum.dis += static_cast<double>(tape.value(obj.dis).data[0]);
        sum.recons += static_cast<double>(tape.value(obj.recons).data[0]);
        ad::Tensor<T> seed(1, 1, inv_batch);
        tape.backward(obj.total, &seed);
      }
      if (cfg.stage == 2 && !groups_checked) {
        for (const char* group : {"encoder.", "processor.", "decoder."})
          if (!(model.params().grad_norm(group) > 0))
            throw NumericalError(std::string("train: parameter group ") + group + " received no gradient");
        groups_checked = true;
      }
      const double gnorm = nn::clip_grad_norm(model.params(), cfg.clip_norm);
      if (!std::isfinite(gnorm)) throw NumericalError("train: non-finite gradient norm at epoch " + std::to_string(epoch));
      ++state.adam_step;
      const double lr = cfg.schedule == "cosine" ? nn::cosine_lr(cfg.learning_rate, state.adam_step - 1, total_steps)
                                                 : cfg.learning_rate;
      nn::adam_step(model.params(), lr, state.adam_step);
    }
    const double n = static_cast<double>(windows.size());
    LossRecord rec;
    rec.epoch = epoch;
    rec.stage = cfg.stage;
    rec.l_dis = sum.dis / n;
    rec.l_recons = sum.recons / n;
    rec.total = sum.total / n;
    rec.wall_seconds =
        wall_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.history.push_back(rec);
    state.epoch = epoch + 1;
    if (on_epoch) on_epoch(rec, state);
  }
  return state;
}

/// Loss CSV: epoch,stage,L_dis,L_recons,total,wall_seconds.
inline std::string loss_csv(const std::vector<LossRecord>& history) {
  std::string out = "epoch,stage,L_dis,L_recons,total,wall_seconds\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%d,%.9e,%.9e,%.9e,%.3f\n", r.epoch, r.stage, r.l_dis, r.l_recons, r.total,
                  r.wall_seconds);
    out += buf;
  }
  return out;
}

}  // namespace eqcollide
