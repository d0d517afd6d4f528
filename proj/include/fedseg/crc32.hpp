#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace fedseg {

namespace detail {

constexpr std::array<std::uint32_t, 256> make_crc32_table() {
    std::array<std::uint32_t, 256> table{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k)
            c = (c & 1u) ? 0xedb88320u ^ (c >> 1) : (c >> 1);
        table[i] = c;
    }
    return table;
}

inline constexpr auto crc32_table = make_crc32_table();

} // namespace detail

// IEEE 802.3 CRC-32 (the zlib polynomial), incremental form.
inline std::uint32_t crc32_update(std::uint32_t crc, const void* data,
                                  std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    crc ^= 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i)
        crc = detail::crc32_table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

inline std::uint32_t crc32(const void* data, std::size_t len) {
    return crc32_update(0u, data, len);
}

} // namespace fedseg
