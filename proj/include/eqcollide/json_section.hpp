// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>

#include "json.hpp"

#include "eqcollide/error.hpp"

namespace eqcollide {

/// Reads the keys of one JSON object into typed fields. finish() rejects any
/// key nobody asked for, naming it with its dotted path.
class JsonSection {
 public:
  JsonSection(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config section '" + path_ + "' must be a JSON object");
  }

  template <class V>
  JsonSection& get(const std::string& key, V& out) {
    used_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        out = it->template get<V>();
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config key '" + dotted(key) + "' has the wrong type: " + e.what());
      }
    }
    return *this;
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  /// Nested object; marks the key as used. Missing sections read as {}.
  const nlohmann::json& child(const std::string& key) {
    used_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    auto it = j_.find(key);
    return it == j_.end() ? empty : *it;
  }

  std::string dotted(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.contains(it.key())) throw ValidationError("unknown config key '" + dotted(it.key()) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace eqcollide
