#pragma once

#include <stdexcept>
#include <string>

namespace edmd {

// Base class for all library errors surfaced through the C API.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape disagreement; message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite value produced by a numeric primitive; message names the primitive.
struct NumericError : Error {
    using Error::Error;
};

// Argument outside the mathematical domain of an operation (e.g. sigma <= 0).
struct DomainError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

// File and serialization failures.
struct IoError : Error {
    using Error::Error;
};

// Raised by the step-distillation collapse guard.
struct CollapseError : Error {
    using Error::Error;
};

}  // namespace edmd
