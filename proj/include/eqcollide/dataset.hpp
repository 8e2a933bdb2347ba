// SPDX-License-Identifier: Apache-2.0
//
// A dataset is a directory of splits. Each split holds one trajectory
// directory per sample plus manifest.json listing ids, seeds and content
// hashes:
//   <root>/<split>/manifest.json
//   <root>/<split>/<id>/{meta.json, positions.f32, velocities.f32, object_ids.u32}
#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqcollide/config.hpp"
#include "eqcollide/evaluation.hpp"
#include "eqcollide/mpm.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide {

inline constexpr int kSplitFormatVersion = 1;

struct SplitEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::string content_hash;
};

struct Split {
  std::string name;
  std::string config_hash;  // data_config_hash of the run config that produced it
  std::vector<SplitEntry> entries;
  std::vector<Trajectory> trajectories;  // filled by load_split

  std::vector<EvalSample> samples() const {
    std::vector<EvalSample> out;
    for (std::size_t i = 0; i < entries.size(); ++i) out.push_back({entries[i].id, &trajectories[i]});
    return out;
  }
};

inline std::string sample_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return buf;
}

/// Staging directory for partially written trajectories: $EQCOLLIDE_SCRATCH
/// when set, otherwise the split directory itself.
inline std::filesystem::path scratch_root(const std::filesystem::path& fallback) {
  if (const char* s = std::getenv("EQCOLLIDE_SCRATCH"); s != nullptr && *s != '\0') return s;
  return fallback;
}

/// Simulates `count` trajectories of `split` on up to `workers` threads and
/// writes them under root/split. Each trajectory is written to a staging
/// directory and moved into place, so a failure never leaves a partial
/// sample behind. Output does not depend on `workers`.
inline Split generate_split(const RunConfig& cfg, const std::string& split, std::size_t count,
                            const std::filesystem::path& root, std::size_t workers = 1) {
  namespace fs = std::filesystem;
  cfg.validate();
  require(count >= 1, "datagen: count must be >= 1");
  const fs::path dir = root / split;
  fs::create_directories(dir);
  const fs::path stage_root = scratch_root(dir) / (".staging-" + split);
  fs::create_directories(stage_root);
  Split out;
  out.name = split;
  out.config_hash = data_config_hash(cfg);
  out.entries.resize(count);
  parallel_for(count, workers, [&](std::size_t i) {
    const std::uint64_t seed = cfg.data.sample_seed(split, i);
    const Trajectory t =
        mpm::generate_trajectory(seed, cfg.data.n_objects, cfg.data.points_per_object, cfg.data.frames, cfg.mpm);
    const std::string id = sample_id(i);
    const fs::path staged = stage_root / id, final_dir = dir / id;
    fs::remove_all(staged);
    write_trajectory(t, staged);
    fs::remove_all(final_dir);
    std::error_code ec;
    fs::rename(staged, final_dir, ec);
    if (ec) {  // staging on another filesystem
      fs::copy(staged, final_dir.string() + ".partial", fs::copy_options::recursive);
      fs::rename(final_dir.string() + ".partial", final_dir);
      fs::remove_all(staged);
    }
    out.entries[i] = {id, seed, t.content_hash()};
  });
  fs::remove_all(stage_root);
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& e : out.entries) samples.push_back({{"id", e.id}, {"seed", e.seed}, {"content_hash", e.content_hash}});
  io_detail::write_json(dir / "manifest.json", {{"format_version", kSplitFormatVersion},
                                                {"split", split},
                                                {"config_hash", out.config_hash},
                                                {"mpm_config_hash", mpm::config_hash(cfg.mpm)},
                                                {"samples", samples}});
  return out;
}

/// Loads every trajectory of root/split and checks the manifest hashes.
inline Split load_split(const std::filesystem::path& root, const std::string& split) {
  const auto dir = root / split;
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw ValidationError("split '" + split + "' not found under " + root.string() + " (no manifest.json)");
  const auto m = io_detail::read_json(dir / "manifest.json");
  const int version = io_detail::meta_field<int>(m, "format_version");
  if (version != kSplitFormatVersion)
    throw FormatError("split manifest format_version " + std::to_string(version) + " is not supported");
  Split s;
  s.name = split;
  s.config_hash = io_detail::meta_field<std::string>(m, "config_hash");
  for (const auto& e : m.at("samples")) {
    SplitEntry entry{e.at("id").get<std::string>(), e.at("seed").get<std::uint64_t>(),
                     e.at("content_hash").get<std::string>()};
    Trajectory t = read_trajectory(dir / entry.id);
    if (t.content_hash() != entry.content_hash)
      throw FormatError("sample " + entry.id + " of split " + split + ": content hash does not match the manifest");
    s.entries.push_back(std::move(entry));
    s.trajectories.push_back(std::move(t));
  }
  return s;
}

}  // namespace eqcollide
