#include "difl/checksum.hpp"

#include <zlib.h>

#include <algorithm>

namespace difl {

uint32_t crc32(std::span<const unsigned char> bytes, uint32_t seed) {
    uLong crc = seed;
    // zlib takes uInt lengths; feed large buffers in chunks.
    constexpr size_t kChunk = 1u << 30;
    size_t offset = 0;
    while (offset < bytes.size()) {
        const size_t n = std::min(kChunk, bytes.size() - offset);
        crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(n));
        offset += n;
    }
    return static_cast<uint32_t>(crc);
}

uint32_t crc32(std::string_view text, uint32_t seed) {
    return crc32(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()), seed);
}

}  // namespace difl
