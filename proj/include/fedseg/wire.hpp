#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "fedseg/crc32.hpp"
#include "fedseg/errors.hpp"

namespace fedseg {

// ---------------------------------------------------------------------------
// Frame layout (little-endian):
//   magic "FEDC" | version u8 = 0x01 | msg_type u8 | payload_len u32
//   | payload | crc32 u32 over (msg_type byte + payload)
// A frame is validated in that order: magic, version, length sanity, CRC,
// then message type, then payload structure.
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t wire_version = 0x01;
inline constexpr std::size_t wire_header_size = 10; // magic 4 + ver 1 + type 1 + len 4
inline constexpr std::uint32_t wire_max_payload = 1u << 26;

enum class msg_type : std::uint8_t {
    hello = 1,
    task = 2,
    update = 3,
    val_request = 4,
    val_response = 5,
    final_model = 6,
    error = 7,
};

// Tags the collaborative method a TASK belongs to.
enum class strategy_tag : std::uint8_t { federated = 1, ciil = 2, iil = 3 };

// Collaborator introduces itself: who it is and how many training/validation
// samples it holds.
struct hello_msg {
    std::uint32_t institution_id = 0;
    std::uint64_t train_count = 0;
    std::uint64_t val_count = 0;
};

// Aggregator hands out one unit of local work on the given parameters.
// `topology` is the CRC of the canonical parameter manifest; a collaborator
// built against a different model must refuse the task.
struct task_msg {
    std::uint32_t round = 0;
    std::uint8_t strategy = static_cast<std::uint8_t>(strategy_tag::federated);
    std::uint32_t epochs = 1;   // pass budget (the cap, in patience mode)
    std::int32_t patience = -1; // >= 0: validation-score early stopping
    std::uint8_t reset_moments = 0;
    std::uint32_t topology = 0;
    std::vector<float> params;
};

struct update_msg {
    std::uint32_t round = 0;
    std::uint64_t n_samples = 0;
    double local_val_dice = std::numeric_limits<double>::quiet_NaN();
    std::vector<float> params;
};

struct val_request_msg {
    std::vector<float> params;
};

struct val_response_msg {
    double val_dice = 0;
    std::uint64_t val_count = 0;
};

struct final_msg {
    std::vector<float> params;
};

struct error_msg {
    std::uint32_t code = 0;
    std::string text;
};

using wire_message = std::variant<hello_msg, task_msg, update_msg, val_request_msg,
                                  val_response_msg, final_msg, error_msg>;

inline msg_type type_of(const wire_message& m) {
    switch (m.index()) {
        case 0: return msg_type::hello;
        case 1: return msg_type::task;
        case 2: return msg_type::update;
        case 3: return msg_type::val_request;
        case 4: return msg_type::val_response;
        case 5: return msg_type::final_model;
        default: return msg_type::error;
    }
}

namespace detail {

inline void put_u8(std::vector<std::uint8_t>& b, std::uint8_t v) { b.push_back(v); }

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    b.push_back(static_cast<std::uint8_t>(v & 0xff));
    b.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    b.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    b.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    put_u32(b, static_cast<std::uint32_t>(v & 0xffffffffu));
    put_u32(b, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::vector<std::uint8_t>& b, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(b, v);
}

inline void put_f64(std::vector<std::uint8_t>& b, double f) {
    std::uint64_t v;
    std::memcpy(&v, &f, 8);
    put_u64(b, v);
}

inline void put_string(std::vector<std::uint8_t>& b, const std::string& s) {
    put_u32(b, static_cast<std::uint32_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
}

// Parameter vectors travel as u64 count + packed float32, the canonical model
// encoding everywhere in the system.
inline void put_params(std::vector<std::uint8_t>& b, const std::vector<float>& p) {
    put_u64(b, p.size());
    for (float f : p) put_f32(b, f);
}

struct byte_reader {
    const std::uint8_t* data;
    std::size_t len;
    std::size_t at = 0;
    bool ok = true;

    bool need(std::size_t n) {
        if (!ok || len - at < n) {
            ok = false;
            return false;
        }
        return true;
    }

    std::uint8_t u8() {
        if (!need(1)) return 0;
        return data[at++];
    }

    std::uint32_t u32() {
        if (!need(4)) return 0;
        std::uint32_t v = static_cast<std::uint32_t>(data[at]) |
                          (static_cast<std::uint32_t>(data[at + 1]) << 8) |
                          (static_cast<std::uint32_t>(data[at + 2]) << 16) |
                          (static_cast<std::uint32_t>(data[at + 3]) << 24);
        at += 4;
        return v;
    }

    std::uint64_t u64() {
        const std::uint64_t lo = u32();
        const std::uint64_t hi = u32();
        return lo | (hi << 32);
    }

    float f32() {
        const std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    double f64() {
        const std::uint64_t v = u64();
        double f;
        std::memcpy(&f, &v, 8);
        return f;
    }

    std::string str() {
        const std::uint32_t n = u32();
        if (!need(n)) return {};
        std::string s(reinterpret_cast<const char*>(data + at), n);
        at += n;
        return s;
    }

    std::vector<float> params() {
        const std::uint64_t n = u64();
        if (!ok || n > wire_max_payload / 4) {
            ok = false;
            return {};
        }
        std::vector<float> p;
        p.reserve(static_cast<std::size_t>(n));
        for (std::uint64_t i = 0; i < n && ok; ++i) p.push_back(f32());
        return p;
    }

    bool done() const { return ok && at == len; }
};

} // namespace detail

inline std::vector<std::uint8_t> encode_payload(const wire_message& m) {
    std::vector<std::uint8_t> b;
    std::visit(
        [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, hello_msg>) {
                detail::put_u32(b, v.institution_id);
                detail::put_u64(b, v.train_count);
                detail::put_u64(b, v.val_count);
            } else if constexpr (std::is_same_v<V, task_msg>) {
                detail::put_u32(b, v.round);
                detail::put_u8(b, v.strategy);
                detail::put_u32(b, v.epochs);
                detail::put_u32(b, static_cast<std::uint32_t>(v.patience));
                detail::put_u8(b, v.reset_moments);
                detail::put_u32(b, v.topology);
                detail::put_params(b, v.params);
            } else if constexpr (std::is_same_v<V, update_msg>) {
                detail::put_u32(b, v.round);
                detail::put_u64(b, v.n_samples);
                detail::put_f64(b, v.local_val_dice);
                detail::put_params(b, v.params);
            } else if constexpr (std::is_same_v<V, val_request_msg>) {
                detail::put_params(b, v.params);
            } else if constexpr (std::is_same_v<V, val_response_msg>) {
                detail::put_f64(b, v.val_dice);
                detail::put_u64(b, v.val_count);
            } else if constexpr (std::is_same_v<V, final_msg>) {
                detail::put_params(b, v.params);
            } else {
                detail::put_u32(b, v.code);
                detail::put_string(b, v.text);
            }
        },
        m);
    return b;
}

inline std::vector<std::uint8_t> encode_frame(const wire_message& m) {
    const auto payload = encode_payload(m);
    if (payload.size() > wire_max_payload)
        throw protocol_error("encode_frame: payload exceeds size cap");
    std::vector<std::uint8_t> f;
    f.reserve(wire_header_size + payload.size() + 4);
    f.insert(f.end(), {'F', 'E', 'D', 'C'});
    detail::put_u8(f, wire_version);
    detail::put_u8(f, static_cast<std::uint8_t>(type_of(m)));
    detail::put_u32(f, static_cast<std::uint32_t>(payload.size()));
    f.insert(f.end(), payload.begin(), payload.end());
    std::uint32_t crc = crc32_update(0, &f[5], 1); // msg_type byte
    crc = crc32_update(crc, payload.data(), payload.size());
    detail::put_u32(f, crc);
    return f;
}

enum class decode_status {
    ok,
    incomplete,   // need more bytes
    bad_magic,    // not a frame boundary; connection is unrecoverable
    bad_version,
    bad_crc,
    unknown_type,
    malformed,    // CRC fine but payload structure is wrong
};

inline const char* decode_status_name(decode_status s) {
    switch (s) {
        case decode_status::ok: return "ok";
        case decode_status::incomplete: return "incomplete";
        case decode_status::bad_magic: return "bad_magic";
        case decode_status::bad_version: return "bad_version";
        case decode_status::bad_crc: return "bad_crc";
        case decode_status::unknown_type: return "unknown_type";
        case decode_status::malformed: return "malformed";
    }
    return "?";
}

struct decode_result {
    decode_status status = decode_status::incomplete;
    std::size_t consumed = 0; // bytes to drop from the stream; 0 means abort
    wire_message message;
};

// Attempts to decode one frame from the front of the buffer. Never throws on
// arbitrary input. `consumed` is the full frame length whenever the frame
// boundary could be established (even for bad_crc / unknown_type /
// malformed); bad_magic and bad_version leave it at 0 because the stream can
// no longer be trusted to contain frame boundaries.
inline decode_result decode_frame(const std::uint8_t* data, std::size_t len) {
    decode_result r;
    if (len < wire_header_size) return r;
    if (std::memcmp(data, "FEDC", 4) != 0) {
        r.status = decode_status::bad_magic;
        return r;
    }
    if (data[4] != wire_version) {
        r.status = decode_status::bad_version;
        return r;
    }
    const std::uint8_t type = data[5];
    std::uint32_t payload_len = 0;
    std::memcpy(&payload_len, data + 6, 4);
    if constexpr (std::endian::native == std::endian::big)
        payload_len = __builtin_bswap32(payload_len);
    if (payload_len > wire_max_payload) {
        r.status = decode_status::malformed;
        return r; // length field itself is untrustworthy; abort
    }
    const std::size_t total = wire_header_size + payload_len + 4;
    if (len < total) return r;
    r.consumed = total;

    const std::uint8_t* payload = data + wire_header_size;
    std::uint32_t crc = crc32_update(0, data + 5, 1);
    crc = crc32_update(crc, payload, payload_len);
    std::uint32_t stated = 0;
    std::memcpy(&stated, data + wire_header_size + payload_len, 4);
    if constexpr (std::endian::native == std::endian::big)
        stated = __builtin_bswap32(stated);
    if (crc != stated) {
        r.status = decode_status::bad_crc;
        return r;
    }
    if (type < 1 || type > 7) {
        r.status = decode_status::unknown_type;
        return r;
    }

    detail::byte_reader rd{payload, payload_len};
    switch (static_cast<msg_type>(type)) {
        case msg_type::hello: {
            hello_msg m;
            m.institution_id = rd.u32();
            m.train_count = rd.u64();
            m.val_count = rd.u64();
            r.message = m;
            break;
        }
        case msg_type::task: {
            task_msg m;
            m.round = rd.u32();
            m.strategy = rd.u8();
            m.epochs = rd.u32();
            m.patience = static_cast<std::int32_t>(rd.u32());
            m.reset_moments = rd.u8();
            m.topology = rd.u32();
            m.params = rd.params();
            r.message = std::move(m);
            break;
        }
        case msg_type::update: {
            update_msg m;
            m.round = rd.u32();
            m.n_samples = rd.u64();
            m.local_val_dice = rd.f64();
            m.params = rd.params();
            r.message = std::move(m);
            break;
        }
        case msg_type::val_request: {
            val_request_msg m;
            m.params = rd.params();
            r.message = std::move(m);
            break;
        }
        case msg_type::val_response: {
            val_response_msg m;
            m.val_dice = rd.f64();
            m.val_count = rd.u64();
            r.message = m;
            break;
        }
        case msg_type::final_model: {
            final_msg m;
            m.params = rd.params();
            r.message = std::move(m);
            break;
        }
        case msg_type::error: {
            error_msg m;
            m.code = rd.u32();
            m.text = rd.str();
            r.message = std::move(m);
            break;
        }
    }
    r.status = rd.done() ? decode_status::ok : decode_status::malformed;
    return r;
}

// Maps a non-ok, non-incomplete decode status to the matching typed failure.
[[noreturn]] inline void throw_decode_failure(decode_status s) {
    switch (s) {
        case decode_status::bad_crc:
            throw integrity_error("frame checksum mismatch");
        case decode_status::bad_version:
            throw version_error("unsupported protocol version");
        case decode_status::unknown_type:
            throw version_error("unknown message type");
        case decode_status::bad_magic:
            throw protocol_error("stream is not frame-aligned (bad magic)");
        default:
            throw protocol_error(std::string("undecodable frame: ") +
                                 decode_status_name(s));
    }
}

} // namespace fedseg
