#include "moemui/format.hpp"

#include <cmath>
#include <cstdio>

namespace moemui {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const double mag = std::fabs(v);
  if (v == 0.0 || (mag >= 1e-3 && mag < 1e9)) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.5e", v);
  }
  return buf;
}

}  // namespace moemui
