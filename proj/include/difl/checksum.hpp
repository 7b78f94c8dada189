#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace difl {

// IEEE CRC-32 (zlib polynomial). `seed` chains successive calls.
uint32_t crc32(std::span<const unsigned char> bytes, uint32_t seed = 0);
uint32_t crc32(std::string_view text, uint32_t seed = 0);

}  // namespace difl
