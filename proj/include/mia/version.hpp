#pragma once

namespace mia {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace mia
