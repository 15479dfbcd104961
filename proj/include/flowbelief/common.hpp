#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowbelief {

// Every failure raised by the library carries a category so callers (and the
// CLI) can distinguish programmer errors (Shape, Logic) from data-dependent
// ones (Numeric, Singular) and environment ones (Io, Config).
class Error : public std::runtime_error {
 public:
  enum class Code { Shape, Numeric, Singular, Io, Config, Logic };

  Error(Code code, const std::string& msg) : std::runtime_error(tag(code) + msg), code_(code) {}
  Code code() const { return code_; }

 private:
  static std::string tag(Code code) {
    switch (code) {
      case Code::Shape: return "[shape] ";
      case Code::Numeric: return "[numeric] ";
      case Code::Singular: return "[singular] ";
      case Code::Io: return "[io] ";
      case Code::Config: return "[config] ";
      case Code::Logic: return "[logic] ";
    }
    return "[?] ";
  }
  Code code_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

}  // namespace flowbelief
