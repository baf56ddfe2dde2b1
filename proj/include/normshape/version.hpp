#pragma once

namespace normshape {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace normshape
