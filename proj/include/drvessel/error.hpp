#pragma once

#include <stdexcept>
#include <string>

namespace drvessel {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or unsupported file content.
struct FormatError : Error {
    using Error::Error;
};

/// Invalid parameters (tile grid, gamma, patch geometry, network spec, ...).
struct ConfigError : Error {
    using Error::Error;
};

/// Operands whose shapes or dimensions do not agree.
struct ShapeError : Error {
    using Error::Error;
};

/// Checkpoint bytes that do not describe a consistent model.
struct CorruptionError : Error {
    using Error::Error;
};

/// Non-finite values during optimization.
struct NumericError : Error {
    using Error::Error;
};

/// Transfer selection cannot be decided from the supplied labels.
struct SelectionError : Error {
    using Error::Error;
};

} // namespace drvessel
