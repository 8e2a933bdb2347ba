// SPDX-License-Identifier: Apache-2.0
//
// Collision-aware message passing over control points. The network maps a
// latent state to the time derivatives of orientations and contexts; edge
// kernels depend only on pairwise pose attributes, with separate kernel
// families for edges inside one object and edges between objects.
#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eqcollide/autodiff.hpp"
#include "eqcollide/decoder.hpp"
#include "eqcollide/geometry.hpp"
#include "eqcollide/latent.hpp"
#include "eqcollide/model_config.hpp"
#include "eqcollide/nn.hpp"

namespace eqcollide {

enum class EdgeLabel : std::uint8_t { inner = 0, inter = 1 };

struct CollisionGraph {
  std::vector<Index> senders;
  std::vector<Index> receivers;
  std::vector<EdgeLabel> labels;
  double collision_distance = 0;
  double control_radius = 0;

  std::size_t size() const { return senders.size(); }
  std::size_t count(EdgeLabel l) const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), l)); }

  /// (sender, receiver) pairs of one label, in graph order.
  std::vector<std::pair<Index, Index>> edges(EdgeLabel l) const {
    std::vector<std::pair<Index, Index>> out;
    for (std::size_t e = 0; e < size(); ++e)
      if (labels[e] == l) out.emplace_back(senders[e], receivers[e]);
    return out;
  }

  bool operator==(const CollisionGraph& o) const {
    return senders == o.senders && receivers == o.receivers && labels == o.labels;
  }
};

struct CollisionGraphOptions {
  double collision_distance = 0.05;
  double control_radius = 0.05;
  CollisionLocality locality = CollisionLocality::both_endpoints;
  bool static_adjacency = false;

  static CollisionGraphOptions from(const ModelConfig& c) {
    return {c.processor.collision_distance, c.processor.control_radius, c.processor.locality, c.static_adjacency};
  }
};

namespace detail {
template <class T>
double dist2(const Vec2<T>& a, const Vec2<T>& b) {
  const double dx = static_cast<double>(a.x) - static_cast<double>(b.x);
  const double dy = static_cast<double>(a.y) - static_cast<double>(b.y);
  return dx * dx + dy * dy;
}
}  // namespace detail

/// Builds the graph for mass points (positions, object ids) and control
/// points (positions, object ids). Inner edges: every ordered pair of
/// distinct control points of one object. Inter edges i -> j: some mass
/// pair (a, b) of the two objects is closer than collision_distance and lies
/// near control points i and j (see CollisionLocality). Edges are ordered
/// inner first, then by (sender, receiver).
template <class T>
CollisionGraph build_collision_graph(std::span<const Vec2<T>> mass_positions, std::span<const Index> mass_objects,
                                     std::span<const Vec2<T>> control_positions,
                                     std::span<const Index> control_objects, const CollisionGraphOptions& opt) {
  require(mass_positions.size() == mass_objects.size(), "build_collision_graph: mass arrays differ in length");
  require(control_positions.size() == control_objects.size(),
          "build_collision_graph: control arrays differ in length");
  require(opt.collision_distance > 0 && opt.control_radius > 0, "build_collision_graph: thresholds must be positive");
  const std::size_t M = control_positions.size();
  CollisionGraph g;
  g.collision_distance = opt.collision_distance;
  g.control_radius = opt.control_radius;

  for (Index i = 0; i < M; ++i)
    for (Index j = 0; j < M; ++j)
      if (i != j && control_objects[i] == control_objects[j]) {
        g.senders.push_back(i);
        g.receivers.push_back(j);
        g.labels.push_back(EdgeLabel::inner);
      }
  if (opt.static_adjacency || M == 0) return g;

  const double dcol2 = opt.collision_distance * opt.collision_distance;
  const double rctl2 = opt.control_radius * opt.control_radius;
  std::vector<char> adj(M * M, 0);

  if (opt.locality == CollisionLocality::both_endpoints) {
    // Control points of its own object near each mass point.
    std::vector<std::vector<Index>> near(mass_positions.size());
    for (Index a = 0; a < mass_positions.size(); ++a)
      for (Index i = 0; i < M; ++i)
        if (control_objects[i] == mass_objects[a] && detail::dist2(mass_positions[a], control_positions[i]) < rctl2)
          near[a].push_back(i);
    const SpatialHash grid(mass_positions, opt.collision_distance);
    for (Index a = 0; a < mass_positions.size(); ++a) {
      if (near[a].empty()) continue;
      grid.for_each_candidate(static_cast<double>(mass_positions[a].x), static_cast<double>(mass_positions[a].y),
                              opt.collision_distance, [&](Index b) {
                                if (mass_objects[b] == mass_objects[a] || near[b].empty()) return;
                                if (detail::dist2(mass_positions[a], mass_positions[b]) >= dcol2) return;
                                for (Index i : near[a])
                                  for (Index j : near[b]) adj[i * M + j] = 1;
                              });
    }
  } else {
    const SpatialHash grid(mass_positions, opt.collision_distance);
    for (Index a = 0; a < mass_positions.size(); ++a)
      grid.for_each_candidate(static_cast<double>(mass_positions[a].x), static_cast<double>(mass_positions[a].y),
                              opt.collision_distance, [&](Index b) {
                                if (mass_objects[b] == mass_objects[a]) return;
                                if (detail::dist2(mass_positions[a], mass_positions[b]) >= dcol2) return;
                                const Vec2<double> mid{
                                    0.5 * (static_cast<double>(mass_positions[a].x) + mass_positions[b].x),
                                    0.5 * (static_cast<double>(mass_positions[a].y) + mass_positions[b].y)};
                                for (Index i = 0; i < M; ++i) {
                                  if (control_objects[i] != mass_objects[a]) continue;
                                  if (detail::dist2(mid, Vec2<double>(control_positions[i])) >= rctl2) continue;
                                  for (Index j = 0; j < M; ++j)
                                    if (control_objects[j] == mass_objects[b] &&
                                        detail::dist2(mid, Vec2<double>(control_positions[j])) < rctl2)
                                      adj[i * M + j] = 1;
                                }
                              });
  }
  for (Index i = 0; i < M; ++i)
    for (Index j = 0; j < M; ++j)
      if (adj[i * M + j]) {
        g.senders.push_back(i);
        g.receivers.push_back(j);
        g.labels.push_back(EdgeLabel::inter);
      }
  return g;
}

template <class T>
CollisionGraph build_collision_graph(const PointCloud<T>& cloud, const LatentState<T>& z,
                                     const CollisionGraphOptions& opt) {
  std::vector<Vec2<T>> ctl(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) ctl[i] = z.poses[i].position;
  return build_collision_graph<T>(cloud.positions, cloud.object_ids, ctl, z.object_ids, opt);
}

template <class T>
struct LatentDerivative {
  ad::Var dtheta;    // M x 1
  ad::Var dcontext;  // M x C
};

template <class T>
class Processor {
 public:
  Processor() = default;
  Processor(nn::ParamStore<T>& store, nn::Initializer& init, const ModelConfig& cfg)
      : cfg_(cfg.processor), group_(cfg.group), kind_(pair_attribute_kind(cfg)),
        context_(cfg.encoder.context_width()) {
    cfg_.validate();
    const std::size_t H = cfg_.hidden;
    const std::size_t node_in = context_ + (group_ == GroupVariant::se2 ? 0 : 2);
    embed_ = nn::Linear<T>(store, init, "processor.embed", node_in, H);
    const std::size_t attr = 2 + orientation_attribute_width(kind_);
    std::size_t poly = attr;
    if (cfg_.polynomial_degree >= 2) poly += attr * attr;
    if (cfg_.polynomial_degree >= 3) poly += attr * attr * attr;
    const char* fam[2] = {"inner", "inter"};
    for (int f = 0; f < 2; ++f)
      basis_[f] = nn::Mlp<T>(store, init, std::string("processor.basis_") + fam[f], poly, {cfg_.basis_dim, cfg_.basis_dim},
                             nn::Activation::silu, true);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "processor.layer" + std::to_string(l);
      Block b;
      for (int f = 0; f < 2; ++f)
        b.kernel[f] = nn::Linear<T>(store, init, p + ".kernel_" + fam[f], cfg_.basis_dim, H);
      b.norm = nn::LayerNorm<T>(store, p + ".norm", H);
      b.mix = nn::Mlp<T>(store, init, p + ".mix", H, {cfg_.widening * H, H}, nn::Activation::silu, false, 0.5);
      blocks_.push_back(std::move(b));
    }
    readout_ = nn::Linear<T>(store, init, "processor.readout", H, 1 + context_, cfg_.readout_gain);
  }

  const ProcessorConfig& config() const { return cfg_; }

  /// Edge attribute of sender s seen from receiver r, scaled to unit range
  /// for the polynomial basis.
  ad::Var edge_attributes(ad::Tape<T>& tape, const LatentVars& z, const std::vector<Index>& senders,
                          const std::vector<Index>& receivers) const {
    using namespace ad;
    Var xs = gather_rows(tape, z.positions, senders), xr = gather_rows(tape, z.positions, receivers);
    Var ts = gather_rows(tape, z.orientations, senders), tr = gather_rows(tape, z.orientations, receivers);
    // Receiver frame: the attribute of the pair (receiver pose, sender pose).
    auto [geo, ori] = pair_attribute<T>(tape, kind_, xr, tr, xs, ts);
    geo = scale(tape, geo, static_cast<T>(1.0 / cfg_.attribute_length_scale));
    return concat_cols(tape, {geo, ori});
  }

  LatentDerivative<T> derivative(ad::Tape<T>& tape, const LatentVars& z, const CollisionGraph& graph) const {
    using namespace ad;
    const std::size_t M = z.size();
    require(tape.rows(z.contexts) == M && tape.cols(z.contexts) == context_,
            "latent_derivative: context shape does not match the processor");
    for (std::size_t e = 0; e < graph.size(); ++e)
      require(graph.senders[e] < M && graph.receivers[e] < M, "latent_derivative: graph node out of range");

    Var node = z.contexts;
    if (group_ == GroupVariant::translation)
      node = concat_cols(tape, {node, sin(tape, z.orientations), cos(tape, z.orientations)});
    Var h = embed_(tape, node);

    struct Family {
      std::vector<Index> s, r;
      Var basis;
    };
    Family fam[2];
    for (std::size_t e = 0; e < graph.size(); ++e) {
      const int f = graph.labels[e] == EdgeLabel::inner ? 0 : 1;
      fam[f].s.push_back(graph.senders[e]);
      fam[f].r.push_back(graph.receivers[e]);
    }
    for (int f = 0; f < 2; ++f)
      if (!fam[f].s.empty())
        fam[f].basis =
            basis_[f](tape, polynomial_features(tape, edge_attributes(tape, z, fam[f].s, fam[f].r), cfg_.polynomial_degree));

    for (const auto& b : blocks_) {
      Var conv;
      for (int f = 0; f < 2; ++f) {
        if (fam[f].s.empty()) continue;
        Var msg = mul(tape, b.kernel[f](tape, fam[f].basis), gather_rows(tape, h, fam[f].s));
        Var agg = scatter_add_rows(tape, msg, fam[f].r, M);
        conv = conv.valid() ? add(tape, conv, agg) : agg;
      }
      if (!conv.valid()) conv = tape.constant(Tensor<T>(M, cfg_.hidden));
      h = add(tape, h, b.mix(tape, b.norm(tape, conv)));
    }
    Var out = scale(tape, readout_(tape, h), static_cast<T>(cfg_.derivative_scale));
    return {slice_cols(tape, out, 0, 1), slice_cols(tape, out, 1, context_)};
  }

 private:
  struct Block {
    nn::Linear<T> kernel[2];
    nn::LayerNorm<T> norm;
    nn::Mlp<T> mix;
  };

  ProcessorConfig cfg_;
  GroupVariant group_ = GroupVariant::se2;
  PairAttribute kind_ = PairAttribute::se2_frame;
  std::size_t context_ = 0;
  nn::Linear<T> embed_;
  nn::Mlp<T> basis_[2];
  std::vector<Block> blocks_;
  nn::Linear<T> readout_;
};

}  // namespace eqcollide
