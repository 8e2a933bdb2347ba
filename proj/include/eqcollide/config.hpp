// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON file with a section per module. Every key is
// optional; unknown keys are rejected with their dotted path.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqcollide/error.hpp"
#include "eqcollide/evaluation.hpp"
#include "eqcollide/hash.hpp"
#include "eqcollide/json_section.hpp"
#include "eqcollide/model_config.hpp"
#include "eqcollide/mpm.hpp"
#include "eqcollide/training.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide {

struct DataConfig {
  std::size_t n_objects = 2;
  std::size_t points_per_object = 500;
  std::size_t frames = 41;
  std::size_t train_count = 4;
  std::size_t val_count = 1;
  std::size_t test_count = 2;
  std::uint64_t seed = 1000;

  void validate() const {
    require(n_objects >= 1, "data.n_objects must be >= 1");
    require(points_per_object >= 1, "data.points_per_object must be >= 1");
    require(frames >= 2, "data.frames must be >= 2");
  }

  std::size_t count(const std::string& split) const {
    if (split == "train") return train_count;
    if (split == "val") return val_count;
    if (split == "test") return test_count;
    throw ValidationError("unknown split '" + split + "' (expected train, val or test)");
  }

  /// Trajectory seed of sample `index` in `split`; splits never share seeds.
  std::uint64_t sample_seed(const std::string& split, std::size_t index) const {
    std::uint64_t offset = split == "train" ? 0 : split == "val" ? 1 : split == "test" ? 2 : 3;
    return seed + offset * 1000003ULL + 7919ULL * index;
  }
};

inline void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"n_objects", c.n_objects},     {"points_per_object", c.points_per_object},
       {"frames", c.frames},           {"train_count", c.train_count},
       {"val_count", c.val_count},     {"test_count", c.test_count},
       {"seed", c.seed}};
}

struct EvalConfig {
  std::vector<std::size_t> schedule = default_schedule();
  std::size_t workers = 1;
  std::size_t equivariance_steps = 5;
  std::size_t group_elements = 10;
  std::uint64_t seed = 77;

  void validate() const {
    require(!schedule.empty(), "eval.schedule must not be empty");
    require(std::is_sorted(schedule.begin(), schedule.end()) && schedule.front() >= 1,
            "eval.schedule must be ascending and start at >= 1");
    require(workers >= 1, "eval.workers must be >= 1");
    require(equivariance_steps >= 1, "eval.equivariance_steps must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"schedule", c.schedule},
       {"workers", c.workers},
       {"equivariance_steps", c.equivariance_steps},
       {"group_elements", c.group_elements},
       {"seed", c.seed}};
}

struct RunConfig {
  mpm::MpmConfig mpm;
  DataConfig data;
  ModelConfig model;
  TrainConfig stage1;
  TrainConfig stage2;
  TrainConfig finetune;
  EvalConfig eval;

  RunConfig() {
    stage1.stage = 1;
    stage2.stage = 2;
    finetune.stage = 2;
    finetune.epochs = 300;
    finetune.finetune_fraction = 0.1;
  }

  const TrainConfig& train(int stage) const {
    require(stage == 1 || stage == 2, "stage must be 1 or 2");
    return stage == 1 ? stage1 : stage2;
  }

  void validate() const {
    mpm.validate();
    data.validate();
    model.validate();
    stage1.validate();
    stage2.validate();
    finetune.validate();
    eval.validate();
    require(stage1.stage == 1, "train_stage1.stage must be 1");
    require(stage2.stage == 2 && finetune.stage == 2, "train_stage2.stage and finetune.stage must be 2");
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"mpm", c.mpm},       {"data", c.data},         {"model", c.model},       {"train_stage1", c.stage1},
       {"train_stage2", c.stage2}, {"finetune", c.finetune}, {"eval", c.eval}};
}

/// Hash of the fully expanded config, so equivalent files hash alike.
inline std::string config_hash(const RunConfig& c) { return hash_string(nlohmann::json(c).dump()); }

/// Hash of the sections that determine generated data (mpm and data).
inline std::string data_config_hash(const RunConfig& c) {
  return hash_string(nlohmann::json{{"mpm", c.mpm}, {"data", c.data}}.dump());
}

namespace config_detail {

inline TrainConfig train_section(const nlohmann::json& j, const std::string& path, TrainConfig defaults) {
  nlohmann::json merged = defaults;
  for (auto it = j.begin(); it != j.end(); ++it) merged[it.key()] = it.value();
  return train_config_from_json(merged, path);
}

}  // namespace config_detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  if (!j.is_object()) throw ValidationError("config: top level must be a JSON object");
  JsonSection s(j, "");
  if (s.has("mpm")) c.mpm = mpm::mpm_config_from_json(s.child("mpm"), "mpm");
  if (s.has("model")) c.model = model_config_from_json(s.child("model"), "model");
  if (s.has("data")) {
    JsonSection d(s.child("data"), "data");
    d.get("n_objects", c.data.n_objects)
        .get("points_per_object", c.data.points_per_object)
        .get("frames", c.data.frames)
        .get("train_count", c.data.train_count)
        .get("val_count", c.data.val_count)
        .get("test_count", c.data.test_count)
        .get("seed", c.data.seed);
    d.finish();
  }
  if (s.has("train_stage1")) c.stage1 = config_detail::train_section(s.child("train_stage1"), "train_stage1", c.stage1);
  if (s.has("train_stage2")) c.stage2 = config_detail::train_section(s.child("train_stage2"), "train_stage2", c.stage2);
  if (s.has("finetune")) c.finetune = config_detail::train_section(s.child("finetune"), "finetune", c.finetune);
  if (s.has("eval")) {
    JsonSection e(s.child("eval"), "eval");
    e.get("schedule", c.eval.schedule)
        .get("workers", c.eval.workers)
        .get("equivariance_steps", c.eval.equivariance_steps)
        .get("group_elements", c.eval.group_elements)
        .get("seed", c.eval.seed);
    e.finish();
  }
  s.finish();
  c.validate();
  return c;
}

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError("override '" + assignment + "' must look like section.key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw ValidationError("override '" + assignment + "' has an empty key component");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

/// Reads a config file (or starts from defaults when `path` is empty) and
/// applies the overrides in order.
inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    try {
      j = io_detail::read_json(path);
    } catch (const FormatError& e) {
      throw ValidationError(std::string("config: ") + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

}  // namespace eqcollide
