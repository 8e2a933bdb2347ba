// SPDX-License-Identifier: Apache-2.0
//
// Point-set encoder: per object, a stack of set-abstraction layers
// (farthest point sampling, ball query, shared per-neighbor MLP, max pool)
// reduces the mass points to a few control points with context vectors.
#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eqcollide/autodiff.hpp"
#include "eqcollide/geometry.hpp"
#include "eqcollide/latent.hpp"
#include "eqcollide/model_config.hpp"
#include "eqcollide/nn.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide {

template <class T>
struct SetAbstractionResult {
  std::vector<Vec2<T>> points;
  std::vector<Vec2<T>> velocities;
  std::vector<Index> indices;  // into the layer's input points
  ad::Var features;            // n_centers x width
};

/// Width of the geometric per-neighbor attribute vector.
inline std::size_t neighbor_attribute_width(GroupVariant g, bool velocity_attributes) {
  if (g == GroupVariant::se2) return 9;
  return velocity_attributes ? 8 : 2;
}

/// Per-neighbor attributes of a (center F, neighbor Q) pair. The SE(2) form
/// uses only rotation invariants: the five scalars with angles as sin/cos
/// pairs, plus both speeds. The cosine between F-Q and vF-vQ enters scaled by
/// both lengths (a plain dot product): when neighbors move together vF-vQ is
/// mostly rounding noise and its direction carries no information.
/// The translation form uses relative quantities and the raw velocities
/// (velocities are translation invariant).
template <class T>
void neighbor_attributes(GroupVariant g, bool velocity_attributes, double radius, double vscale,
                         const Vec2<T>& f, const Vec2<T>& vf, const Vec2<T>& q, const Vec2<T>& vq, T* out) {
  const T inv_r = static_cast<T>(1.0 / radius);
  const T inv_v = static_cast<T>(1.0 / vscale);
  if (g == GroupVariant::se2) {
    const auto inv = rotation_invariants(f, vf, q, vq);
    out[0] = std::sin(inv[0]);
    out[1] = std::cos(inv[0]);
    out[2] = std::sin(inv[1]);
    out[3] = std::cos(inv[1]);
    out[4] = inv[2] * inv_r * inv_r;
    out[5] = inv[3] * inv_v * inv_v;
    out[6] = dot(f - q, vf - vq) * inv_r * inv_v;
    out[7] = norm(vf) * inv_v;
    out[8] = norm(vq) * inv_v;
    return;
  }
  const Vec2<T> rel = (q - f) * inv_r;
  out[0] = rel.x;
  out[1] = rel.y;
  if (!velocity_attributes) return;
  const Vec2<T> dv = (vq - vf) * inv_v;
  out[2] = dv.x;
  out[3] = dv.y;
  out[4] = vf.x * inv_v;
  out[5] = vf.y * inv_v;
  out[6] = vq.x * inv_v;
  out[7] = vq.y * inv_v;
}

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParamStore<T>& store, nn::Initializer& init, const ModelConfig& cfg)
      : cfg_(cfg.encoder), group_(cfg.group) {
    cfg_.validate();
    const std::size_t attr = neighbor_attribute_width(group_, cfg_.velocity_attributes);
    std::size_t prev = 0;
    for (std::size_t l = 0; l < cfg_.layers(); ++l) {
      mlps_.emplace_back(store, init, "encoder.sa" + std::to_string(l), attr + prev, cfg_.mlp_widths[l],
                         nn::Activation::relu, true);
      prev = cfg_.mlp_widths[l].back();
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t context_width() const { return cfg_.context_width(); }

  /// One set-abstraction layer. `features` may be invalid for the first
  /// layer. The sample count is clamped to the number of points.
  SetAbstractionResult<T> set_abstraction(ad::Tape<T>& tape, std::span<const Vec2<T>> points,
                                          std::span<const Vec2<T>> velocities, ad::Var features,
                                          std::size_t layer) const {
    require(layer < mlps_.size(), "set_abstraction: layer out of range");
    require(!points.empty(), "set_abstraction: empty point set");
    require(velocities.size() == points.size(), "set_abstraction: velocities and points differ in length");
    const std::size_t n_s = std::min(cfg_.samples[layer], points.size());
    const std::size_t k = cfg_.max_neighbors[layer];
    const double radius = cfg_.radii[layer];

    SetAbstractionResult<T> out;
    out.indices = farthest_point_sample(points, n_s);
    const NeighborList nl = ball_query(std::span<const Index>(out.indices), points, radius, k);

    const std::size_t attr_w = neighbor_attribute_width(group_, cfg_.velocity_attributes);
    ad::Tensor<T> attr(n_s * k, attr_w);
    for (std::size_t c = 0; c < n_s; ++c) {
      const Index fc = out.indices[c];
      const auto nb = nl.of(c);
      for (std::size_t j = 0; j < k; ++j)
        neighbor_attributes(group_, cfg_.velocity_attributes, radius, cfg_.velocity_scale, points[fc],
                            velocities[fc], points[nb[j]], velocities[nb[j]], attr.row(c * k + j));
    }
    ad::Var x = tape.constant(std::move(attr));
    if (features.valid()) x = ad::concat_cols(tape, {x, ad::gather_rows(tape, features, nl.indices)});
    out.features = ad::group_max(tape, mlps_[layer](tape, x), k);

    out.points.reserve(n_s);
    out.velocities.reserve(n_s);
    for (Index i : out.indices) {
      out.points.push_back(points[i]);
      out.velocities.push_back(velocities[i]);
    }
    return out;
  }

  /// Encodes each object independently and stacks the control points in
  /// object order.
  LatentVars encode(ad::Tape<T>& tape, const PointCloud<T>& cloud) const {
    cloud.validate();
    const auto members = cloud.object_members();
    require(!members.empty(), "encode: empty point cloud");
    std::vector<ad::Var> contexts;
    std::vector<Vec2<T>> ctl_pos;
    std::vector<T> ctl_theta;
    LatentVars z;
    for (Index o = 0; o < members.size(); ++o) {
      const auto& idx = members[o];
      require(!idx.empty(), "encode: object " + std::to_string(o) + " has no points");
      std::vector<Vec2<T>> pts, vel;
      pts.reserve(idx.size());
      vel.reserve(idx.size());
      for (Index i : idx) {
        pts.push_back(cloud.positions[i]);
        vel.push_back(cloud.velocities[i]);
      }
      Vec2<double> centroid{};
      for (const auto& p : pts) centroid = centroid + Vec2<double>(p);
      centroid = centroid * (1.0 / static_cast<double>(pts.size()));
      std::vector<Index> source = idx;
      ad::Var feat;
      for (std::size_t l = 0; l < mlps_.size(); ++l) {
        auto sa = set_abstraction(tape, pts, vel, feat, l);
        std::vector<Index> next(sa.indices.size());
        for (std::size_t c = 0; c < sa.indices.size(); ++c) next[c] = source[sa.indices[c]];
        source = std::move(next);
        pts = std::move(sa.points);
        vel = std::move(sa.velocities);
        feat = sa.features;
      }
      contexts.push_back(feat);
      for (std::size_t c = 0; c < source.size(); ++c) {
        z.source_indices.push_back(source[c]);
        z.object_ids.push_back(o);
        ctl_pos.push_back(pts[c]);
        ctl_theta.push_back(control_orientation(pts[c], vel[c], centroid));
      }
    }
    z.positions = tape.constant(positions_tensor<T>(ctl_pos));
    z.orientations = tape.constant(ad::Tensor<T>(ctl_theta.size(), 1, ctl_theta));
    z.contexts = contexts.size() == 1 ? contexts[0] : ad::concat_rows(tape, contexts);
    return z;
  }

  LatentState<T> encode(const PointCloud<T>& cloud) const {
    ad::Tape<T> tape(false);
    return latent_values(tape, encode(tape, cloud));
  }

 private:
  /// Heading of the control point's velocity. A resting point (objects are
  /// often dropped from rest) instead faces away from its object's
  /// centroid, which keeps the orientation equivariant.
  static T control_orientation(const Vec2<T>& p, const Vec2<T>& v, const Vec2<double>& centroid) {
    if (norm(v) >= T(1e-8)) return heading(v);
    return heading(Vec2<T>(static_cast<T>(p.x - centroid.x), static_cast<T>(p.y - centroid.y)));
  }

  EncoderConfig cfg_;
  GroupVariant group_ = GroupVariant::se2;
  std::vector<nn::Mlp<T>> mlps_;
};

}  // namespace eqcollide
