#pragma once

namespace mtwn {

inline constexpr const char* kVersionString = "mtwavenet-0.1.0";

}  // namespace mtwn
