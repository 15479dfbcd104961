#pragma once
// Flat key=value configuration. Files hold one `key = value` pair per line
// with '#' comments; command-line overrides use the same `key=value` form.
// Values stay strings until a typed getter parses them, so the resolved
// config can be written back exactly as given.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowbelief/common.hpp"

namespace flowbelief {

class FlatConfig {
 public:
  FlatConfig() = default;

  static FlatConfig from_file(const std::string& path);

  // Applies one "key=value" override (--set form). Later calls win.
  void apply_override(const std::string& kv);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return values_; }

  // Typed getters. The one-argument forms throw on a missing key; the
  // two-argument forms fall back to the default. All parsers reject
  // trailing garbage ("12x" is not an int).
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Serializes as sorted "key = value" lines (deterministic for identical
  // contents, whatever order the keys arrived in).
  std::string serialize() const;
  void save(const std::string& path) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace flowbelief
