#pragma once

namespace osaq {

inline constexpr const char* kToolVersion = "osaq-0.1.0";

}  // namespace osaq
