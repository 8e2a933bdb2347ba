// SPDX-License-Identifier: Apache-2.0
//
// Mass point clouds, trajectories, and the on-disk trajectory directory:
//
//   meta.json        format_version, n_frames, n_points, n_objects,
//                    dt_seconds, provenance
//   positions.f32    n_frames x n_points x 2, little-endian, frame-major
//   velocities.f32   same shape as positions
//   object_ids.u32   n_points
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "eqcollide/error.hpp"
#include "eqcollide/geometry.hpp"
#include "eqcollide/hash.hpp"

namespace eqcollide {

static_assert(std::endian::native == std::endian::little, "trajectory I/O assumes a little-endian host");

inline constexpr int kTrajectoryFormatVersion = 1;

template <class T>
struct PointCloud {
  std::vector<Vec2<T>> positions;
  std::vector<Vec2<T>> velocities;
  std::vector<Index> object_ids;

  std::size_t size() const { return positions.size(); }

  std::size_t n_objects() const {
    Index mx = 0;
    for (Index o : object_ids) mx = std::max(mx, o);
    return object_ids.empty() ? 0 : mx + 1;
  }

  /// Point indices grouped by object, each group in ascending order.
  std::vector<std::vector<Index>> object_members() const {
    std::vector<std::vector<Index>> out(n_objects());
    for (Index i = 0; i < object_ids.size(); ++i) out[object_ids[i]].push_back(i);
    return out;
  }

  void validate() const {
    require(velocities.size() == positions.size(), "PointCloud: velocities and positions differ in length");
    require(object_ids.size() == positions.size(), "PointCloud: object_ids and positions differ in length");
    std::vector<bool> seen(n_objects(), false);
    for (Index o : object_ids) seen[o] = true;
    for (bool s : seen) require(s, "PointCloud: object ids must be contiguous from 0");
    for (std::size_t i = 0; i < size(); ++i)
      if (!is_finite(positions[i]) || !is_finite(velocities[i]))
        throw NumericalError("PointCloud: non-finite state at point " + std::to_string(i));
  }

  template <class U>
  PointCloud<U> cast() const {
    PointCloud<U> out;
    out.positions.reserve(size());
    out.velocities.reserve(size());
    for (const auto& p : positions) out.positions.emplace_back(p);
    for (const auto& v : velocities) out.velocities.emplace_back(v);
    out.object_ids = object_ids;
    return out;
  }

  PointCloud transformed(const GroupElement<T>& g) const {
    PointCloud out;
    out.object_ids = object_ids;
    out.positions.reserve(size());
    out.velocities.reserve(size());
    for (const auto& p : positions) out.positions.push_back(g.act_point(p));
    for (const auto& v : velocities) out.velocities.push_back(g.act_vector(v));
    return out;
  }

  /// Sub-cloud of the given objects, ids renumbered 0..k-1 in the given order.
  PointCloud select_objects(const std::vector<Index>& objects) const {
    PointCloud out;
    for (Index k = 0; k < objects.size(); ++k)
      for (std::size_t i = 0; i < size(); ++i)
        if (object_ids[i] == objects[k]) {
          out.positions.push_back(positions[i]);
          out.velocities.push_back(velocities[i]);
          out.object_ids.push_back(k);
        }
    return out;
  }
};

using MassPointCloud = PointCloud<float>;

struct Provenance {
  std::string generator = "unknown";
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string content_hash;

  nlohmann::json to_json() const {
    return {{"generator", generator}, {"config_hash", config_hash}, {"seed", seed}, {"content_hash", content_hash}};
  }
  static Provenance from_json(const nlohmann::json& j) {
    Provenance p;
    p.generator = j.value("generator", std::string("unknown"));
    p.config_hash = j.value("config_hash", std::string());
    p.seed = j.value("seed", std::uint64_t{0});
    p.content_hash = j.value("content_hash", std::string());
    return p;
  }
};

struct Trajectory {
  std::vector<MassPointCloud> frames;
  double dt = 0.002;
  Provenance provenance;

  std::size_t n_frames() const { return frames.size(); }
  std::size_t n_points() const { return frames.empty() ? 0 : frames.front().size(); }
  std::size_t n_objects() const { return frames.empty() ? 0 : frames.front().n_objects(); }

  void validate() const {
    require(dt > 0, "Trajectory: dt must be positive");
    require(!frames.empty(), "Trajectory: no frames");
    for (const auto& f : frames) {
      f.validate();
      require(f.size() == n_points(), "Trajectory: point count changes between frames");
      require(f.object_ids == frames.front().object_ids, "Trajectory: object ids change between frames");
    }
  }

  /// Hash of the float32 payloads in file order.
  std::string content_hash() const {
    Fnv1a h;
    for (const auto& f : frames) h.update_span(std::span<const Vec2<float>>(f.positions));
    for (const auto& f : frames) h.update_span(std::span<const Vec2<float>>(f.velocities));
    if (!frames.empty()) h.update_span(std::span<const Index>(frames.front().object_ids));
    return h.hex();
  }

  /// Frames [begin, begin + length).
  Trajectory window(std::size_t begin, std::size_t length) const {
    require(begin + length <= frames.size(), "Trajectory::window: range exceeds trajectory");
    Trajectory out;
    out.dt = dt;
    out.provenance = provenance;
    out.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(begin),
                      frames.begin() + static_cast<std::ptrdiff_t>(begin + length));
    return out;
  }
};

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

namespace io_detail {

template <class T>
void write_array(const std::filesystem::path& path, std::span<const T> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  if (!out) throw FormatError("write failed: " + path.string());
}

template <class T>
std::vector<T> read_array(const std::filesystem::path& path, std::size_t expected, const std::string& what) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError(what + ": missing file " + path.filename().string());
  if (bytes != expected * sizeof(T))
    throw FormatError("shape mismatch in " + path.filename().string() + ": holds " +
                      std::to_string(bytes / sizeof(T)) + " " + what + " values, meta implies " +
                      std::to_string(expected));
  std::vector<T> out(expected);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw FormatError("truncated array: " + path.filename().string());
  return out;
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.filename().string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

template <class T>
T meta_field(const nlohmann::json& meta, const char* key) {
  if (!meta.contains(key)) throw FormatError(std::string("meta.json: missing field ") + key);
  try {
    return meta.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("meta.json: field ") + key + " has the wrong type");
  }
}

}  // namespace io_detail

/// Writes `traj` into directory `dir` (created if needed). The provenance
/// content hash is recomputed from the payload.
inline void write_trajectory(const Trajectory& traj, const std::filesystem::path& dir) {
  traj.validate();
  std::filesystem::create_directories(dir);
  const std::size_t nf = traj.n_frames(), np = traj.n_points();
  std::vector<float> pos, vel;
  pos.reserve(nf * np * 2);
  vel.reserve(nf * np * 2);
  for (const auto& f : traj.frames) {
    for (const auto& p : f.positions) {
      pos.push_back(p.x);
      pos.push_back(p.y);
    }
    for (const auto& v : f.velocities) {
      vel.push_back(v.x);
      vel.push_back(v.y);
    }
  }
  io_detail::write_array(dir / "positions.f32", std::span<const float>(pos));
  io_detail::write_array(dir / "velocities.f32", std::span<const float>(vel));
  io_detail::write_array(dir / "object_ids.u32", std::span<const Index>(traj.frames.front().object_ids));
  Provenance prov = traj.provenance;
  prov.content_hash = traj.content_hash();
  nlohmann::json meta = {{"format_version", kTrajectoryFormatVersion},
                         {"n_frames", nf},
                         {"n_points", np},
                         {"n_objects", traj.n_objects()},
                         {"dt_seconds", traj.dt},
                         {"provenance", prov.to_json()}};
  io_detail::write_json(dir / "meta.json", meta);
}

inline Trajectory read_trajectory(const std::filesystem::path& dir) {
  const auto meta = io_detail::read_json(dir / "meta.json");
  const int version = io_detail::meta_field<int>(meta, "format_version");
  if (version != kTrajectoryFormatVersion)
    throw FormatError("format_version mismatch: file has " + std::to_string(version) + ", reader expects " +
                      std::to_string(kTrajectoryFormatVersion));
  const auto nf = io_detail::meta_field<std::size_t>(meta, "n_frames");
  const auto np = io_detail::meta_field<std::size_t>(meta, "n_points");
  const auto no = io_detail::meta_field<std::size_t>(meta, "n_objects");
  const auto dt = io_detail::meta_field<double>(meta, "dt_seconds");
  if (nf == 0) throw FormatError("meta.json: n_frames must be positive");
  if (!(dt > 0)) throw FormatError("meta.json: dt_seconds must be positive");

  const auto ids = io_detail::read_array<Index>(dir / "object_ids.u32", np, "object_ids (n_points)");
  const auto pos = io_detail::read_array<float>(dir / "positions.f32", nf * np * 2, "positions (n_frames*n_points*2)");
  const auto vel =
      io_detail::read_array<float>(dir / "velocities.f32", nf * np * 2, "velocities (n_frames*n_points*2)");

  Trajectory traj;
  traj.dt = dt;
  if (meta.contains("provenance")) traj.provenance = Provenance::from_json(meta["provenance"]);
  traj.frames.resize(nf);
  for (std::size_t f = 0; f < nf; ++f) {
    auto& fr = traj.frames[f];
    fr.object_ids = ids;
    fr.positions.resize(np);
    fr.velocities.resize(np);
    for (std::size_t i = 0; i < np; ++i) {
      fr.positions[i] = {pos[(f * np + i) * 2], pos[(f * np + i) * 2 + 1]};
      fr.velocities[i] = {vel[(f * np + i) * 2], vel[(f * np + i) * 2 + 1]};
    }
  }
  if (traj.n_objects() != no)
    throw FormatError("shape mismatch: object_ids.u32 has " + std::to_string(traj.n_objects()) +
                      " objects, meta n_objects = " + std::to_string(no));
  for (Index o : ids)
    if (o >= no) throw FormatError("object_ids.u32: id out of range");
  return traj;
}

/// Reads an external K x 2 float32 point set (same layout as one frame of
/// positions.f32). Used as the shape import hook.
inline std::vector<Vec2<double>> read_point_set(const std::filesystem::path& path) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("missing point set " + path.string());
  if (bytes % (2 * sizeof(float)) != 0) throw FormatError("point set size is not a multiple of 8 bytes");
  const auto raw = io_detail::read_array<float>(path, bytes / sizeof(float), "point set");
  std::vector<Vec2<double>> out;
  for (std::size_t i = 0; i + 1 < raw.size(); i += 2) out.emplace_back(raw[i], raw[i + 1]);
  return out;
}

}  // namespace eqcollide
