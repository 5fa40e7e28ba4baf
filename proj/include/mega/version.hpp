#pragma once

namespace mega {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace mega
