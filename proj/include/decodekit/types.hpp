#pragma once

#include <cstdint>

namespace decodekit {

using TokenId = std::int32_t;

}  // namespace decodekit
