#pragma once

#include <stdexcept>
#include <string>

namespace morphnn {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched tensor extents, chained layer sizes, kernel geometry.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid argument values: rates outside [0,1], non-positive temperature,
// labels out of range, malformed configs.
struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

// A tropical reduction with no finite candidate (all -inf/+inf row, no bias).
struct DegenerateRowError : Error {
    explicit DegenerateRowError(const std::string& msg) : Error(msg) {}
};

// Gradient checking failed to find a point away from a tropical tie.
struct DegeneratePointError : Error {
    explicit DegeneratePointError(const std::string& msg) : Error(msg) {}
};

// Misuse of stateful objects (e.g. backward on a consumed tape).
struct StateError : Error {
    explicit StateError(const std::string& msg) : Error(msg) {}
};

// File format / filesystem problems.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf gradients during optimization; message carries the parameter id.
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

} // namespace morphnn
