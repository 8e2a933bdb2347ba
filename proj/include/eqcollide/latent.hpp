// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "eqcollide/autodiff.hpp"
#include "eqcollide/geometry.hpp"

namespace eqcollide {

/// M control points: poses, context vectors, and the fixed map back into
/// the mass cloud.
template <class T>
struct LatentState {
  std::vector<Pose2<T>> poses;
  ad::Tensor<T> contexts;  // M x C
  std::vector<Index> source_indices;
  std::vector<Index> object_ids;

  std::size_t size() const { return poses.size(); }

  /// Acts on poses only; contexts are invariant features.
  LatentState transformed(const GroupElement<T>& g) const {
    LatentState out = *this;
    for (auto& p : out.poses) p = g.act_pose(p);
    return out;
  }
};

/// The same state living on a tape, so gradients can flow through it.
struct LatentVars {
  ad::Var positions;     // M x 2
  ad::Var orientations;  // M x 1
  ad::Var contexts;      // M x C
  std::vector<Index> source_indices;
  std::vector<Index> object_ids;

  std::size_t size() const { return source_indices.size(); }
};

template <class T>
LatentState<T> latent_values(const ad::Tape<T>& tape, const LatentVars& z) {
  LatentState<T> out;
  const auto& pos = tape.value(z.positions);
  const auto& th = tape.value(z.orientations);
  out.poses.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out.poses[i] = Pose2<T>{{pos(i, 0), pos(i, 1)}, th.data[i]};
  out.contexts = tape.value(z.contexts);
  out.source_indices = z.source_indices;
  out.object_ids = z.object_ids;
  return out;
}

/// Places a value state on the tape as constants.
template <class T>
LatentVars latent_constants(ad::Tape<T>& tape, const LatentState<T>& z) {
  ad::Tensor<T> pos(z.size(), 2), th(z.size(), 1);
  for (std::size_t i = 0; i < z.size(); ++i) {
    pos(i, 0) = z.poses[i].position.x;
    pos(i, 1) = z.poses[i].position.y;
    th.data[i] = z.poses[i].orientation;
  }
  return LatentVars{tape.constant(std::move(pos)), tape.constant(std::move(th)), tape.constant(z.contexts),
                    z.source_indices, z.object_ids};
}

template <class T>
ad::Tensor<T> positions_tensor(std::span<const Vec2<T>> pts) {
  ad::Tensor<T> t(pts.size(), 2);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t(i, 0) = pts[i].x;
    t(i, 1) = pts[i].y;
  }
  return t;
}

template <class T>
std::vector<Vec2<T>> tensor_points(const ad::Tensor<T>& t) {
  std::vector<Vec2<T>> out(t.rows);
  for (std::size_t i = 0; i < t.rows; ++i) out[i] = Vec2<T>{t(i, 0), t(i, 1)};
  return out;
}

}  // namespace eqcollide
