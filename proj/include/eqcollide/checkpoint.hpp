// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory layout:
//   manifest.json          configs, hashes, training progress, parameter list
//   params/<name>.f32      parameter values
//   adam_m/<name>.f32      first Adam moment
//   adam_v/<name>.f32      second Adam moment
//   loss.csv               loss history: epoch,stage,L_dis,L_recons,total,wall_seconds
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqcollide/hash.hpp"
#include "eqcollide/model.hpp"
#include "eqcollide/training.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  TrainState state;
  std::string parameters_hash;
};

/// Hash over parameter names, shapes and float32 values in name order.
template <class T>
std::string parameters_hash(const nn::ParamStore<T>& store) {
  Fnv1a h;
  for (const auto& [name, p] : store.all()) {
    h.update(name);
    const std::uint64_t shape[2] = {p.value.rows, p.value.cols};
    h.update(shape, sizeof shape);
    for (T v : p.value.data) {
      const float f = static_cast<float>(v);
      h.update(&f, sizeof f);
    }
  }
  return h.hex();
}

namespace ckpt_detail {

inline std::vector<LossRecord> parse_history(const std::filesystem::path& path) {
  std::vector<LossRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LossRecord r;
    char c;
    std::istringstream ss(line);
    if (!(ss >> r.epoch >> c >> r.stage >> c >> r.l_dis >> c >> r.l_recons >> c >> r.total >> c >> r.wall_seconds))
      throw FormatError("loss.csv: malformed line '" + line + "'");
    out.push_back(r);
  }
  return out;
}

template <class T>
void write_tensor(const std::filesystem::path& path, const ad::Tensor<T>& t) {
  std::vector<float> f(t.data.begin(), t.data.end());
  io_detail::write_array<float>(path, f);
}

template <class T>
void read_tensor(const std::filesystem::path& path, ad::Tensor<T>& t, const std::string& what) {
  const auto f = io_detail::read_array<float>(path, t.size(), what);
  for (std::size_t i = 0; i < f.size(); ++i) t.data[i] = static_cast<T>(f[i]);
}

}  // namespace ckpt_detail

/// Writes model parameters, optimizer moments and progress into `dir`.
/// `extra` keys (such as the producing run config hash) are added to the
/// manifest.
template <class T>
void save_checkpoint(const std::filesystem::path& dir, const Model<T>& model, const TrainConfig& train,
                     const TrainState& state, const nlohmann::json& extra = nlohmann::json::object()) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "params");
  fs::create_directories(dir / "adam_m");
  fs::create_directories(dir / "adam_v");
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, p] : model.params().all()) {
    const std::string file = name + ".f32";
    ckpt_detail::write_tensor(dir / "params" / file, p.value);
    ckpt_detail::write_tensor(dir / "adam_m" / file, p.adam_m);
    ckpt_detail::write_tensor(dir / "adam_v" / file, p.adam_v);
    params.push_back({{"name", name}, {"shape", {p.value.rows, p.value.cols}}, {"file", file}});
  }
  nlohmann::json m = {{"format_version", kCheckpointFormatVersion},
                      {"model", model.config()},
                      {"model_config_hash", config_hash(model.config())},
                      {"train", train},
                      {"train_config_hash", config_hash(train)},
                      {"stage", state.stage},
                      {"epoch", state.epoch},
                      {"adam_step", state.adam_step},
                      {"parameters", params},
                      {"parameters_hash", parameters_hash(model.params())}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  std::ofstream(dir / "loss.csv", std::ios::trunc) << loss_csv(state.history);
  io_detail::write_json(dir / "manifest.json", m);
}

/// Reads the manifest only.
inline Checkpoint read_checkpoint_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw FormatError("not a checkpoint (no manifest.json): " + dir.string());
  const auto m = io_detail::read_json(path);
  const int version = io_detail::meta_field<int>(m, "format_version");
  if (version != kCheckpointFormatVersion)
    throw FormatError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
  Checkpoint c;
  try {
    c.model = model_config_from_json(m.at("model"));
    c.train = train_config_from_json(m.at("train"));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  if (config_hash(c.model) != io_detail::meta_field<std::string>(m, "model_config_hash"))
    throw FormatError("checkpoint manifest: model_config_hash does not match the stored model config");
  if (config_hash(c.train) != io_detail::meta_field<std::string>(m, "train_config_hash"))
    throw FormatError("checkpoint manifest: train_config_hash does not match the stored train config");
  c.state.stage = io_detail::meta_field<int>(m, "stage");
  c.state.epoch = io_detail::meta_field<std::size_t>(m, "epoch");
  c.state.adam_step = io_detail::meta_field<std::uint64_t>(m, "adam_step");
  c.parameters_hash = io_detail::meta_field<std::string>(m, "parameters_hash");
  c.state.history = ckpt_detail::parse_history(dir / "loss.csv");
  return c;
}

/// Loads parameters (and Adam moments) into `model`, whose configuration
/// must hash equal to the stored one. Returns the manifest.
template <class T>
Checkpoint load_checkpoint(const std::filesystem::path& dir, Model<T>& model) {
  Checkpoint c = read_checkpoint_manifest(dir);
  if (config_hash(c.model) != config_hash(model.config()))
    throw FormatError("checkpoint " + dir.string() + " was written for a different model config (hash " +
                      config_hash(c.model) + ", expected " + config_hash(model.config()) + ")");
  for (auto& [name, p] : model.params().all()) {
    const std::string file = name + ".f32";
    ckpt_detail::read_tensor(dir / "params" / file, p.value, name);
    ckpt_detail::read_tensor(dir / "adam_m" / file, p.adam_m, name);
    ckpt_detail::read_tensor(dir / "adam_v" / file, p.adam_v, name);
    p.zero_grad();
  }
  if (parameters_hash(model.params()) != c.parameters_hash)
    throw FormatError("checkpoint " + dir.string() + ": parameter content hash mismatch (files were modified)");
  return c;
}

/// Resuming needs the exact training config the checkpoint was written with.
inline void require_resumable(const Checkpoint& c, const TrainConfig& train) {
  if (config_hash(c.train) != config_hash(train))
    throw FormatError("cannot resume: train config hash " + config_hash(train) + " differs from the checkpoint's " +
                      config_hash(c.train));
}

}  // namespace eqcollide
