// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace eqcollide {

/// 64-bit FNV-1a, used for config and content provenance hashes.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <class T>
  void update_span(std::span<const T> s) {
    update(s.data(), s.size_bytes());
  }
  std::uint64_t value() const { return h_; }
  std::string hex() const { return to_hex(h_); }

  static std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hash_string(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.hex();
}

}  // namespace eqcollide
