#pragma once

#include <charconv>
#include <cmath>
#include <string>

namespace cbx {

// Shortest text that parses back to exactly v.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace cbx
