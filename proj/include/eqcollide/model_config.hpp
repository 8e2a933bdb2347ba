// SPDX-License-Identifier: Apache-2.0
//
// Architecture hyperparameters for the encoder, field decoder, and latent
// processor, plus their JSON form.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqcollide/error.hpp"
#include "eqcollide/hash.hpp"
#include "eqcollide/json_section.hpp"

namespace eqcollide {

/// Symmetry group the model is built to respect.
enum class GroupVariant { translation, se2 };

inline std::string to_string(GroupVariant v) { return v == GroupVariant::se2 ? "se2" : "translation"; }
inline GroupVariant parse_group_variant(const std::string& s) {
  if (s == "se2") return GroupVariant::se2;
  if (s == "translation") return GroupVariant::translation;
  throw ValidationError("unknown group variant '" + s + "' (expected 'se2' or 'translation')");
}

struct EncoderConfig {
  std::vector<std::vector<std::size_t>> mlp_widths{{32, 32, 64}, {64, 64, 128}, {128, 128, 32}};
  std::vector<std::size_t> samples{512, 128, 16};
  std::vector<double> radii{0.025, 0.05, 0.1};
  std::vector<std::size_t> max_neighbors{32, 64, 128};
  double velocity_scale = 1.0;  // velocities are divided by this before entering the MLPs
  bool velocity_attributes = true;  // translation variant: feed relative and raw velocities

  std::size_t layers() const { return samples.size(); }
  std::size_t context_width() const { return mlp_widths.back().back(); }
  std::size_t points_per_object() const { return samples.back(); }

  void validate() const {
    require(!samples.empty(), "encoder.samples must not be empty");
    require(mlp_widths.size() == samples.size() && radii.size() == samples.size() &&
                max_neighbors.size() == samples.size(),
            "encoder: mlp_widths, samples, radii and max_neighbors must have equal lengths");
    for (std::size_t l = 0; l < samples.size(); ++l) {
      require(!mlp_widths[l].empty(), "encoder.mlp_widths entries must not be empty");
      for (std::size_t w : mlp_widths[l]) require(w >= 1, "encoder.mlp_widths entries must be >= 1");
      require(samples[l] >= 1, "encoder.samples entries must be >= 1");
      require(radii[l] > 0, "encoder.radii entries must be positive");
      require(max_neighbors[l] >= 1, "encoder.max_neighbors entries must be >= 1");
    }
    require(velocity_scale > 0, "encoder.velocity_scale must be positive");
  }
};

struct DecoderConfig {
  std::size_t heads = 2;
  std::size_t self_attention_layers = 1;
  std::size_t hidden = 64;
  double window_sigma = 0.1;
  double query_rff_scale = 0.05;  // length scale of the query-side random features
  double value_rff_scale = 0.2;   // length scale of the value-side random features
  std::size_t query_rff_features = 16;
  std::size_t value_rff_features = 16;
  std::size_t context_width = 32;  // must match the encoder's final width

  void validate() const {
    require(heads >= 1, "decoder.heads must be >= 1");
    require(hidden >= heads && hidden % heads == 0, "decoder.hidden must be a multiple of decoder.heads");
    require(window_sigma > 0, "decoder.window_sigma must be positive");
    require(query_rff_scale > 0 && value_rff_scale > 0, "decoder RFF scales must be positive");
    require(query_rff_features >= 1 && value_rff_features >= 1, "decoder RFF feature counts must be >= 1");
    require(context_width >= 1, "decoder.context_width must be >= 1");
  }
};

/// How the inter-object predicate localizes a colliding mass pair.
enum class CollisionLocality {
  both_endpoints,  // a near control point i and b near control point j
  pair_midpoint,   // the pair's midpoint near both control points
};

inline std::string to_string(CollisionLocality c) {
  return c == CollisionLocality::both_endpoints ? "both_endpoints" : "pair_midpoint";
}
inline CollisionLocality parse_collision_locality(const std::string& s) {
  if (s == "both_endpoints") return CollisionLocality::both_endpoints;
  if (s == "pair_midpoint") return CollisionLocality::pair_midpoint;
  throw ValidationError("unknown collision locality '" + s + "'");
}

struct ProcessorConfig {
  std::size_t hidden = 64;
  std::size_t layers = 3;
  std::size_t widening = 2;
  int polynomial_degree = 3;
  std::size_t basis_dim = 64;
  double collision_distance = 0.05;  // d_col
  double control_radius = 0.05;      // r_ctl
  CollisionLocality locality = CollisionLocality::both_endpoints;
  double attribute_length_scale = 0.1;  // edge positions are divided by this
  double derivative_scale = 20.0;       // multiplies the readout
  double readout_gain = 0.1;

  void validate() const {
    require(hidden >= 1 && layers >= 1 && widening >= 1, "processor widths and depth must be >= 1");
    require(polynomial_degree >= 1 && polynomial_degree <= 3, "processor.polynomial_degree must be 1..3");
    require(basis_dim >= 1, "processor.basis_dim must be >= 1");
    require(collision_distance > 0 && control_radius > 0, "processor thresholds must be positive");
    require(attribute_length_scale > 0, "processor.attribute_length_scale must be positive");
  }
};

struct ModelConfig {
  GroupVariant group = GroupVariant::se2;
  bool non_equivariant_attr = false;  // ablation: x_i + x_j style attributes
  bool static_adjacency = false;      // ablation: no inter-object edges
  std::uint64_t init_seed = 0;
  EncoderConfig encoder;
  DecoderConfig decoder;
  ProcessorConfig processor;

  void validate() const {
    encoder.validate();
    decoder.validate();
    processor.validate();
    require(decoder.context_width == encoder.context_width(),
            "decoder.context_width (" + std::to_string(decoder.context_width) +
                ") must equal the encoder's final width (" + std::to_string(encoder.context_width()) + ")");
  }
};

// --- JSON ------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"mlp_widths", c.mlp_widths},     {"samples", c.samples},
       {"radii", c.radii},               {"max_neighbors", c.max_neighbors},
       {"velocity_scale", c.velocity_scale}, {"velocity_attributes", c.velocity_attributes}};
}
inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"heads", c.heads},
       {"self_attention_layers", c.self_attention_layers},
       {"hidden", c.hidden},
       {"window_sigma", c.window_sigma},
       {"query_rff_scale", c.query_rff_scale},
       {"value_rff_scale", c.value_rff_scale},
       {"query_rff_features", c.query_rff_features},
       {"value_rff_features", c.value_rff_features},
       {"context_width", c.context_width}};
}
inline void to_json(nlohmann::json& j, const ProcessorConfig& c) {
  j = {{"hidden", c.hidden},
       {"layers", c.layers},
       {"widening", c.widening},
       {"polynomial_degree", c.polynomial_degree},
       {"basis_dim", c.basis_dim},
       {"collision_distance", c.collision_distance},
       {"control_radius", c.control_radius},
       {"locality", to_string(c.locality)},
       {"attribute_length_scale", c.attribute_length_scale},
       {"derivative_scale", c.derivative_scale},
       {"readout_gain", c.readout_gain}};
}
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"group", to_string(c.group)},
       {"non_equivariant_attr", c.non_equivariant_attr},
       {"static_adjacency", c.static_adjacency},
       {"init_seed", c.init_seed},
       {"encoder", c.encoder},
       {"decoder", c.decoder},
       {"processor", c.processor}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j, const std::string& path) {
  EncoderConfig c;
  JsonSection s(j, path);
  s.get("mlp_widths", c.mlp_widths)
      .get("samples", c.samples)
      .get("radii", c.radii)
      .get("max_neighbors", c.max_neighbors)
      .get("velocity_scale", c.velocity_scale)
      .get("velocity_attributes", c.velocity_attributes);
  s.finish();
  return c;
}

inline DecoderConfig decoder_config_from_json(const nlohmann::json& j, const std::string& path) {
  DecoderConfig c;
  JsonSection s(j, path);
  s.get("heads", c.heads)
      .get("self_attention_layers", c.self_attention_layers)
      .get("hidden", c.hidden)
      .get("window_sigma", c.window_sigma)
      .get("query_rff_scale", c.query_rff_scale)
      .get("value_rff_scale", c.value_rff_scale)
      .get("query_rff_features", c.query_rff_features)
      .get("value_rff_features", c.value_rff_features)
      .get("context_width", c.context_width);
  s.finish();
  return c;
}

inline ProcessorConfig processor_config_from_json(const nlohmann::json& j, const std::string& path) {
  ProcessorConfig c;
  std::string locality = to_string(c.locality);
  JsonSection s(j, path);
  s.get("hidden", c.hidden)
      .get("layers", c.layers)
      .get("widening", c.widening)
      .get("polynomial_degree", c.polynomial_degree)
      .get("basis_dim", c.basis_dim)
      .get("collision_distance", c.collision_distance)
      .get("control_radius", c.control_radius)
      .get("locality", locality)
      .get("attribute_length_scale", c.attribute_length_scale)
      .get("derivative_scale", c.derivative_scale)
      .get("readout_gain", c.readout_gain);
  s.finish();
  c.locality = parse_collision_locality(locality);
  return c;
}

/// Reads a "model" section. The decoder's context width follows the encoder
/// unless set explicitly.
inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model") {
  ModelConfig c;
  std::string group = to_string(c.group);
  JsonSection s(j, path);
  s.get("group", group)
      .get("non_equivariant_attr", c.non_equivariant_attr)
      .get("static_adjacency", c.static_adjacency)
      .get("init_seed", c.init_seed);
  c.encoder = encoder_config_from_json(s.child("encoder"), s.dotted("encoder"));
  const nlohmann::json& dec = s.child("decoder");
  c.decoder = decoder_config_from_json(dec, s.dotted("decoder"));
  if (!dec.contains("context_width")) c.decoder.context_width = c.encoder.context_width();
  c.processor = processor_config_from_json(s.child("processor"), s.dotted("processor"));
  s.finish();
  c.group = parse_group_variant(group);
  return c;
}

inline std::string config_hash(const ModelConfig& c) {
  nlohmann::json j = c;
  return hash_string(j.dump());
}

/// Model ablations, one switch per call.
enum class Ablation { non_equivariant_attr, static_adjacency };

inline Ablation parse_ablation(const std::string& s) {
  if (s == "non_equivariant_attr") return Ablation::non_equivariant_attr;
  if (s == "static_adjacency") return Ablation::static_adjacency;
  throw ValidationError("unknown ablation flag '" + s + "' (expected non_equivariant_attr or static_adjacency)");
}

[[nodiscard]] inline ModelConfig ablation_configure(ModelConfig cfg, Ablation which) {
  if (which == Ablation::non_equivariant_attr) cfg.non_equivariant_attr = true;
  if (which == Ablation::static_adjacency) cfg.static_adjacency = true;
  return cfg;
}

/// String form; an empty string means "no ablation" and returns cfg as is.
[[nodiscard]] inline ModelConfig ablation_configure(ModelConfig cfg, const std::string& which) {
  if (which.empty() || which == "none") return cfg;
  return ablation_configure(std::move(cfg), parse_ablation(which));
}

}  // namespace eqcollide
