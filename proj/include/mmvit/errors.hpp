#pragma once

#include <stdexcept>
#include <string>

namespace mmvit {

// Base class for everything this library throws on purpose. The CLI maps the
// subclasses to exit codes (config -> 2, data/format -> 3).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or axis mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration value or combination (model dims, CLI keys, ...).
struct ConfigError : Error {
    using Error::Error;
};

// A documented precondition of an operation was violated.
struct ContractError : Error {
    using Error::Error;
};

// Operation invoked in the wrong object state (e.g. backward twice on a tape).
struct StateError : Error {
    using Error::Error;
};

// Malformed file contents. Carries the byte offset where parsing failed.
struct FormatError : Error {
    FormatError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

// Problems with dataset contents (missing files, label out of range, ...).
struct DataError : Error {
    using Error::Error;
};

}  // namespace mmvit
