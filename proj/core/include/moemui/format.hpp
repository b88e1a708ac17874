#pragma once

#include <string>

namespace moemui {

/// Fixed six decimals ("0.150000") for magnitudes in [1e-3, 1e9) and zero;
/// six significant digits in scientific notation otherwise; "inf"/"nan".
std::string format_number(double v);

}  // namespace moemui
