#pragma once

#include <stdexcept>
#include <string>

namespace fedseg {

// Error taxonomy shared by all modules. Everything derives from error so
// callers can catch the whole family at an experiment-cell boundary.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/parameter dimension mismatches.
struct shape_error : error {
    using error::error;
};

// Non-finite values where finite ones are required.
struct numeric_error : error {
    using error::error;
};

// Caller violated a documented precondition (empty sample set, etc).
struct precondition_error : error {
    using error::error;
};

// Invalid or inconsistent configuration.
struct config_error : error {
    using error::error;
};

// Wire/aggregation protocol violations (bad magic, mixed rounds, ...).
struct protocol_error : error {
    using error::error;
};

// Checksum mismatch on an otherwise well-formed frame.
struct integrity_error : error {
    using error::error;
};

// Unknown message type or topology-hash mismatch.
struct version_error : error {
    using error::error;
};

// Asked a run log for a track it does not carry.
struct query_error : error {
    using error::error;
};

} // namespace fedseg
