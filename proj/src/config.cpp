#include "flowbelief/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace flowbelief {

namespace {

std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* want) {
  throw Error(Error::Code::Config,
              "config: key '" + key + "' has value '" + value + "', expected " + want);
}

}  // namespace

FlatConfig FlatConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(Error::Code::Io, "cannot open config file '" + path + "'");
  }
  FlatConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = strip(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(Error::Code::Config, "config file '" + path + "' line " +
                                           std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = strip(line.substr(0, eq));
    const std::string value = strip(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw Error(Error::Code::Config, "config file '" + path + "' line " +
                                           std::to_string(lineno) + ": empty key or value");
    }
    cfg.values_[key] = value;
  }
  return cfg;
}

void FlatConfig::apply_override(const std::string& kv) {
  const std::size_t eq = kv.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == kv.size()) {
    throw Error(Error::Code::Config, "override '" + kv + "' is not of the form key=value");
  }
  set(strip(kv.substr(0, eq)), strip(kv.substr(eq + 1)));
}

void FlatConfig::set(const std::string& key, const std::string& value) {
  if (key.empty() || value.empty()) {
    throw Error(Error::Code::Config, "config: empty key or value");
  }
  values_[key] = value;
}

bool FlatConfig::has(const std::string& key) const { return values_.count(key) != 0; }

std::string FlatConfig::get_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw Error(Error::Code::Config, "config: missing required key '" + key + "'");
  }
  return it->second;
}

std::string FlatConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

long long FlatConfig::get_int(const std::string& key) const {
  const std::string v = get_string(key);
  errno = 0;
  char* end = nullptr;
  const long long out = std::strtoll(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0') bad_value(key, v, "an integer");
  return out;
}

long long FlatConfig::get_int(const std::string& key, long long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

std::uint64_t FlatConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get_string(key);
  errno = 0;
  char* end = nullptr;
  const unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0' || v[0] == '-') {
    bad_value(key, v, "a non-negative integer");
  }
  return out;
}

double FlatConfig::get_double(const std::string& key) const {
  const std::string v = get_string(key);
  errno = 0;
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (errno != 0 || end == v.c_str() || *end != '\0') bad_value(key, v, "a number");
  return out;
}

double FlatConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool FlatConfig::get_bool(const std::string& key) const {
  const std::string v = get_string(key);
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  bad_value(key, v, "a boolean (true/false/on/off/1/0)");
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

std::string FlatConfig::serialize() const {
  std::ostringstream out;
  for (const auto& [key, value] : values_) {
    out << key << " = " << value << '\n';
  }
  return out.str();
}

void FlatConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) {
    throw Error(Error::Code::Io, "cannot write config file '" + path + "'");
  }
  out << serialize();
  if (!out) {
    throw Error(Error::Code::Io, "failed writing config file '" + path + "'");
  }
}

}  // namespace flowbelief
