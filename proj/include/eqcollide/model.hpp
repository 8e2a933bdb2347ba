// SPDX-License-Identifier: Apache-2.0
//
// Encoder, processor and field decoder behind one parameter store, plus the
// explicit Euler step that couples mass points and control points.
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "eqcollide/autodiff.hpp"
#include "eqcollide/decoder.hpp"
#include "eqcollide/encoder.hpp"
#include "eqcollide/latent.hpp"
#include "eqcollide/model_config.hpp"
#include "eqcollide/nn.hpp"
#include "eqcollide/processor.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide {

/// Replacement for the learned field, for tests and diagnostics.
template <class T>
using FieldFn = std::function<ad::Var(ad::Tape<T>&, ad::Var queries, const LatentVars&)>;

template <class T>
struct StepVars {
  ad::Var positions;   // N x 2
  ad::Var velocities;  // N x 2, the field evaluated at the previous positions
  LatentVars z;
  CollisionGraph graph;  // the graph the derivative was computed on
};

template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(checked(cfg)), init_(cfg.init_seed) {
    encoder_ = Encoder<T>(store_, init_, cfg_);
    decoder_ = FieldDecoder<T>(store_, init_, cfg_);
    processor_ = Processor<T>(store_, init_, cfg_);
  }
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const Encoder<T>& encoder() const { return encoder_; }
  FieldDecoder<T>& decoder() { return decoder_; }
  const FieldDecoder<T>& decoder() const { return decoder_; }
  const Processor<T>& processor() const { return processor_; }

  /// Copies parameter values from a model of the same configuration,
  /// converting the scalar type.
  template <class U>
  void copy_parameters_from(const Model<U>& other) {
    for (auto& [name, p] : store_.all()) {
      const auto& src = other.params().at(name);
      require(src.value.size() == p.value.size(), "copy_parameters_from: shape mismatch for " + name);
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value.data[i] = static_cast<T>(src.value.data[i]);
    }
  }

  LatentVars encode(ad::Tape<T>& tape, const PointCloud<T>& cloud) const { return encoder_.encode(tape, cloud); }
  LatentState<T> encode(const PointCloud<T>& cloud) const { return encoder_.encode(cloud); }

  ad::Var decode(ad::Tape<T>& tape, ad::Var queries, const LatentVars& z) const {
    return decoder_.decode(tape, queries, z);
  }

  CollisionGraph collision_graph(const ad::Tape<T>& tape, ad::Var positions, std::span<const Index> mass_objects,
                                 const LatentVars& z) const {
    const auto mass = tensor_points(tape.value(positions));
    const auto ctl = tensor_points(tape.value(z.positions));
    return build_collision_graph<T>(mass, mass_objects, ctl, z.object_ids, CollisionGraphOptions::from(cfg_));
  }

  /// One Euler step. With dt == 0 the inputs are returned unchanged.
  StepVars<T> step(ad::Tape<T>& tape, ad::Var positions, ad::Var velocities, const LatentVars& z,
                   std::span<const Index> mass_objects, double dt, const FieldFn<T>* field = nullptr) const {
    require(dt >= 0, "step: dt must be >= 0");
    require(tape.rows(positions) == mass_objects.size(), "step: positions and object ids differ in length");
    StepVars<T> out;
    if (dt == 0) {
      out.positions = positions;
      out.velocities = velocities;
      out.z = z;
      return out;
    }
    using namespace ad;
    const T h = static_cast<T>(dt);
    Var v = field != nullptr ? (*field)(tape, positions, z) : decoder_.decode(tape, positions, z);
    out.velocities = v;
    out.positions = add(tape, positions, scale(tape, v, h));
    out.graph = collision_graph(tape, positions, mass_objects, z);
    const auto d = processor_.derivative(tape, z, out.graph);
    out.z.orientations = wrap_angle(tape, add(tape, z.orientations, scale(tape, d.dtheta, h)));
    out.z.contexts = add(tape, z.contexts, scale(tape, d.dcontext, h));
    out.z.positions = gather_rows(tape, out.positions, z.source_indices);
    out.z.source_indices = z.source_indices;
    out.z.object_ids = z.object_ids;
    return out;
  }

  /// Value-level step on a cloud and latent state.
  std::pair<LatentState<T>, PointCloud<T>> step(const LatentState<T>& z, const PointCloud<T>& cloud, double dt,
                                                const FieldFn<T>* field = nullptr) const {
    ad::Tape<T> tape(false);
    auto r = step(tape, tape.constant(positions_tensor<T>(cloud.positions)),
                  tape.constant(positions_tensor<T>(cloud.velocities)), latent_constants(tape, z), cloud.object_ids,
                  dt, field);
    PointCloud<T> next;
    next.positions = tensor_points(tape.value(r.positions));
    next.velocities = tensor_points(tape.value(r.velocities));
    next.object_ids = cloud.object_ids;
    return {latent_values(tape, r.z), std::move(next)};
  }

 private:
  static ModelConfig checked(const ModelConfig& c) {
    c.validate();
    return c;
  }

  ModelConfig cfg_;
  nn::Initializer init_;
  nn::ParamStore<T> store_;
  Encoder<T> encoder_;
  FieldDecoder<T> decoder_;
  Processor<T> processor_;
};

}  // namespace eqcollide
