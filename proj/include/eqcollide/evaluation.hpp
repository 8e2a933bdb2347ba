// SPDX-License-Identifier: Apache-2.0
//
// Rollouts, k-step MSE reports, the two-pipeline equivariance check and the
// generalization harnesses built on them.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "eqcollide/error.hpp"
#include "eqcollide/geometry.hpp"
#include "eqcollide/model.hpp"
#include "eqcollide/training.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide {

inline const std::vector<std::size_t>& default_schedule() {
  static const std::vector<std::size_t> s{1, 5, 10, 15, 20, 25};
  return s;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written to per-index slots, so the output does not depend on scheduling.
/// The first exception (lowest index) is rethrown.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Positions must stay inside this box during a rollout.
inline constexpr double kRolloutLow = -1.0;
inline constexpr double kRolloutHigh = 2.0;

/// Encodes frame0 once and applies the learned step n_steps times. Frame 0
/// is the input; frame t+1 holds the predicted positions after step t and
/// the velocity field used for that step.
inline Trajectory rollout(const Model<float>& model, const MassPointCloud& frame0, std::size_t n_steps, double dt,
                          const FieldFn<float>* field = nullptr) {
  require(n_steps >= 1, "rollout: n_steps must be >= 1");
  require(dt > 0, "rollout: dt must be positive");
  frame0.validate();
  Trajectory out;
  out.dt = dt;
  out.provenance.generator = "rollout";
  out.frames.reserve(n_steps + 1);
  out.frames.push_back(frame0);
  auto z = model.encode(frame0);
  MassPointCloud cloud = frame0;
  for (std::size_t t = 0; t < n_steps; ++t) {
    std::tie(z, cloud) = model.step(z, cloud, dt, field);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud.positions[i];
      if (!is_finite(p) || !is_finite(cloud.velocities[i]))
        throw NumericalError("rollout diverged at step " + std::to_string(t + 1) + ": non-finite state at point " +
                             std::to_string(i));
      if (p.x < kRolloutLow || p.x > kRolloutHigh || p.y < kRolloutLow || p.y > kRolloutHigh)
        throw NumericalError("rollout diverged at step " + std::to_string(t + 1) + ": point " + std::to_string(i) +
                             " left [-1, 2]^2");
    }
    for (float c : z.contexts.data)
      if (!std::isfinite(c)) throw NumericalError("rollout diverged at step " + std::to_string(t + 1) + ": latent");
    out.frames.push_back(cloud);
  }
  return out;
}

/// MSE of positions at exactly each scheduled step: the mean over points of
/// the squared Euclidean error (a uniform offset (0.001, 0) reports 1e-6).
inline std::vector<double> rollout_mse(const Trajectory& pred, const Trajectory& gt,
                                       const std::vector<std::size_t>& schedule) {
  require(pred.n_points() == gt.n_points(), "rollout_mse: point counts differ");
  require(std::abs(pred.dt - gt.dt) <= 1e-12 * std::max(1.0, gt.dt), "rollout_mse: dt differs");
  require(std::is_sorted(schedule.begin(), schedule.end()), "rollout_mse: schedule must be sorted ascending");
  std::vector<double> out;
  out.reserve(schedule.size());
  for (std::size_t k : schedule) {
    if (k >= pred.n_frames() || k >= gt.n_frames())
      throw ValidationError("rollout_mse: step " + std::to_string(k) + " is beyond the trajectory (" +
                            std::to_string(std::min(pred.n_frames(), gt.n_frames())) + " frames)");
    out.push_back(point_mse<float>(pred.frames[k].positions, gt.frames[k].positions));
  }
  return out;
}

struct ReportRow {
  std::string split;
  std::string sample_id;
  std::size_t step = 0;
  double mse = 0;
};

struct RolloutReport {
  std::vector<std::size_t> schedule;
  std::vector<ReportRow> rows;  // sample-major, schedule order within a sample
  std::string checkpoint_hash;
  std::string data_split;
  std::string config_hash;

  /// Mean over samples at each scheduled step.
  std::vector<double> means() const {
    std::vector<double> sum(schedule.size(), 0.0);
    std::vector<std::size_t> cnt(schedule.size(), 0);
    for (const auto& r : rows) {
      const auto it = std::find(schedule.begin(), schedule.end(), r.step);
      const auto k = static_cast<std::size_t>(it - schedule.begin());
      sum[k] += r.mse;
      ++cnt[k];
    }
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] = cnt[k] ? sum[k] / static_cast<double>(cnt[k]) : 0.0;
    return sum;
  }

  /// split,sample_id,step,mse
  std::string per_sample_csv() const {
    std::string out = "split,sample_id,step,mse\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, ",%zu,%.9e\n", r.step, r.mse);
      out += r.split + "," + r.sample_id + buf;
    }
    return out;
  }

  /// One row per split with one column per scheduled step.
  std::string summary_csv() const {
    std::string out =
        "# k-step MSE is measured at step k only (not averaged over steps 1..k); mean over samples of the "
        "per-point squared position error\n";
    out += "# checkpoint " + checkpoint_hash + ", config " + config_hash + "\n";
    out += "split";
    for (std::size_t k : schedule) out += "," + std::to_string(k) + "-step";
    out += "\n" + data_split;
    char buf[32];
    for (double m : means()) {
      std::snprintf(buf, sizeof buf, ",%.9e", m);
      out += buf;
    }
    return out + "\n";
  }
};

struct EvalSample {
  std::string id;
  const Trajectory* trajectory = nullptr;
};

/// Rolls out every sample from its frame 0 and tabulates the k-step MSE.
/// Samples run concurrently; the report does not depend on `workers`.
inline RolloutReport evaluate(const Model<float>& model, const std::vector<EvalSample>& samples,
                              const std::vector<std::size_t>& schedule, const std::string& split,
                              std::size_t workers = 1) {
  require(!samples.empty(), "evaluate: split '" + split + "' has no samples");
  require(!schedule.empty() && schedule.front() >= 1, "evaluate: schedule must be non-empty and start at >= 1");
  for (const auto& s : samples)
    if (s.trajectory->n_frames() <= schedule.back())
      throw ValidationError("evaluate: sample " + s.id + " has " + std::to_string(s.trajectory->n_frames()) +
                            " frames, the schedule needs " + std::to_string(schedule.back() + 1));
  std::vector<std::vector<double>> mse(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    const Trajectory& gt = *samples[i].trajectory;
    mse[i] = rollout_mse(rollout(model, gt.frames[0], schedule.back(), gt.dt), gt, schedule);
  });
  RolloutReport r;
  r.schedule = schedule;
  r.data_split = split;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t k = 0; k < schedule.size(); ++k) r.rows.push_back({split, samples[i].id, schedule[k], mse[i][k]});
  return r;
}

/// Mean MSE over samples at every step 1..n_steps, for long-horizon curves.
inline std::vector<double> horizon_curve(const Model<float>& model, const std::vector<const Trajectory*>& samples,
                                         std::size_t n_steps, std::size_t workers = 1) {
  std::vector<std::size_t> steps(n_steps);
  for (std::size_t k = 0; k < n_steps; ++k) steps[k] = k + 1;
  std::vector<std::vector<double>> per(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    const Trajectory& gt = *samples[i];
    per[i] = rollout_mse(rollout(model, gt.frames[0], n_steps, gt.dt), gt, steps);
  });
  std::vector<double> mean(n_steps, 0.0);
  for (const auto& p : per)
    for (std::size_t k = 0; k < n_steps; ++k) mean[k] += p[k] / static_cast<double>(samples.size());
  return mean;
}

/// ||a - b|| / (||a|| + ||b|| + 1e-12) over all points of one frame.
inline double frame_relative_deviation(std::span<const Vec2<float>> a, std::span<const Vec2<float>> b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ax = a[i].x, ay = a[i].y, bx = b[i].x, by = b[i].y;
    d += (ax - bx) * (ax - bx) + (ay - by) * (ay - by);
    na += ax * ax + ay * ay;
    nb += bx * bx + by * by;
  }
  return std::sqrt(d) / (std::sqrt(na) + std::sqrt(nb) + 1e-12);
}

/// Compares rollout(g . frame0) against g . rollout(frame0) for each group
/// element and returns the maximum relative position deviation over frames,
/// one value per element.
inline std::vector<double> verify_equivariance(const Model<float>& model, const MassPointCloud& frame0,
                                               const std::vector<GroupElement<float>>& elements, std::size_t n_steps,
                                               double dt) {
  for (const auto& g : elements)
    if (model.config().group == GroupVariant::translation && g.angle != 0.0f)
      throw ValidationError("verify_equivariance: rotation requested on a translation-only model");
  const Trajectory base = rollout(model, frame0, n_steps, dt);
  std::vector<double> out;
  out.reserve(elements.size());
  for (const auto& g : elements) {
    const Trajectory moved = rollout(model, frame0.transformed(g), n_steps, dt);
    double worst = 0;
    for (std::size_t t = 0; t < base.n_frames(); ++t) {
      const auto expect = base.frames[t].transformed(g);
      worst = std::max(worst, frame_relative_deviation(moved.frames[t].positions, expect.positions));
    }
    out.push_back(worst);
  }
  return out;
}

/// Parses "identity", "translation:x,y", "rotation:angle" or
/// "se2:angle,x,y" into a group element.
inline GroupElement<float> parse_group_element(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  std::vector<double> v;
  if (colon != std::string::npos) {
    std::string rest = spec.substr(colon + 1);
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      const auto comma = rest.find(',', pos);
      const std::string tok = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ValidationError("group element '" + spec + "': '" + tok + "' is not a number");
      }
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }
  auto want = [&](std::size_t n) {
    if (v.size() != n)
      throw ValidationError("group element '" + spec + "': expected " + std::to_string(n) + " numbers");
  };
  GroupElement<float> g{};
  if (kind == "identity") {
    want(0);
  } else if (kind == "translation") {
    want(2);
    g.translation = {static_cast<float>(v[0]), static_cast<float>(v[1])};
  } else if (kind == "rotation") {
    want(1);
    g.angle = static_cast<float>(v[0]);
  } else if (kind == "se2") {
    want(3);
    g.angle = static_cast<float>(v[0]);
    g.translation = {static_cast<float>(v[1]), static_cast<float>(v[2])};
  } else {
    throw ValidationError("group element '" + spec + "': kind must be identity, translation, rotation or se2");
  }
  return g;
}

/// Random group elements drawn from the model's group: for SE(2) models a
/// rotation about the domain center (0.5, 0.5), then a translation in
/// [-0.2, 0.2]^2. Keeping the center fixed keeps rotated scenes in range.
inline std::vector<GroupElement<float>> random_group_elements(GroupVariant g, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> a(-std::numbers::pi, std::numbers::pi), t(-0.2, 0.2);
  std::vector<GroupElement<float>> out;
  for (std::size_t i = 0; i < n; ++i) {
    GroupElement<float> e{};
    const double angle = g == GroupVariant::se2 ? a(rng) : 0.0;
    const double tx = t(rng), ty = t(rng);
    const double c = std::cos(angle), s = std::sin(angle);
    e.angle = static_cast<float>(angle);
    e.translation = {static_cast<float>(0.5 - (c * 0.5 - s * 0.5) + tx), static_cast<float>(0.5 - (s * 0.5 + c * 0.5) + ty)};
    out.push_back(e);
  }
  return out;
}

}  // namespace eqcollide
