#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fedseg/crc32.hpp"
#include "fedseg/errors.hpp"

namespace fedseg {

// One manifest entry: the shape of a named parameter block.
struct param_shape {
    std::string layer_id;
    std::vector<int> dims;

    std::size_t count() const {
        std::size_t n = 1;
        for (int d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }

    friend bool operator==(const param_shape&, const param_shape&) = default;
};

// Ordered list of parameter blocks in canonical topology order; two models of
// the same topology always agree on the flat layout.
using param_manifest = std::vector<param_shape>;

inline std::size_t manifest_count(const param_manifest& m) {
    std::size_t n = 0;
    for (const auto& s : m) n += s.count();
    return n;
}

// CRC32 over a canonical serialization of the manifest; guards the wire
// against mismatched topologies.
inline std::uint32_t topology_hash(const param_manifest& m) {
    std::uint32_t crc = 0;
    for (const auto& s : m) {
        crc = crc32_update(crc, s.layer_id.data(), s.layer_id.size());
        for (int d : s.dims) {
            const auto u = static_cast<std::uint32_t>(d);
            unsigned char le[4] = {static_cast<unsigned char>(u & 0xff),
                                   static_cast<unsigned char>((u >> 8) & 0xff),
                                   static_cast<unsigned char>((u >> 16) & 0xff),
                                   static_cast<unsigned char>((u >> 24) & 0xff)};
            crc = crc32_update(crc, le, 4);
        }
    }
    return crc;
}

// A model's parameters as one flat vector plus its shape manifest.
// T is float (single precision, the default) or double (oracle runs).
template <class T>
struct flat_params {
    std::vector<T> values;
    param_manifest manifest;

    std::size_t size() const { return values.size(); }

    void check_consistent() const {
        if (values.size() != manifest_count(manifest))
            throw shape_error("flat_params: values length " +
                              std::to_string(values.size()) +
                              " does not match manifest total " +
                              std::to_string(manifest_count(manifest)));
    }

    // Offset of a manifest entry in the flat vector.
    std::size_t offset_of(std::size_t entry) const {
        std::size_t off = 0;
        for (std::size_t i = 0; i < entry; ++i) off += manifest[i].count();
        return off;
    }
};

// CRC32 of the float32 little-endian encoding; the checksum logged per step
// and used for wire-level identity checks.
template <class T>
std::uint32_t params_crc32(const std::vector<T>& values) {
    std::uint32_t crc = 0;
    for (const T& v : values) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        static_assert(sizeof(bits) == sizeof(f));
        __builtin_memcpy(&bits, &f, 4);
        unsigned char le[4] = {static_cast<unsigned char>(bits & 0xff),
                               static_cast<unsigned char>((bits >> 8) & 0xff),
                               static_cast<unsigned char>((bits >> 16) & 0xff),
                               static_cast<unsigned char>((bits >> 24) & 0xff)};
        crc = crc32_update(crc, le, 4);
    }
    return crc;
}

} // namespace fedseg
