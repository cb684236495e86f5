#pragma once

#include <stdexcept>
#include <string>

namespace gafm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents do not line up (conv channels, concat spatial dims, ...).
struct ShapeError : Error {
    using Error::Error;
};

// A layer / run configuration is internally inconsistent.
struct ConfigError : Error {
    using Error::Error;
};

// Misuse of the recording tape (non-scalar loss, detached tensor, nested tapes).
struct TapeError : Error {
    using Error::Error;
};

// File could not be read, written or parsed.
struct IoError : Error {
    using Error::Error;
};

// Input data violates a documented contract (negative income, dangling ids).
struct DataError : Error {
    using Error::Error;
};

// A metric is undefined for the given inputs (e.g. R^2 with constant actuals).
struct MetricError : Error {
    using Error::Error;
};

// Training produced a non-finite loss. Carries the last finite losses so the
// CLI can report them before exiting with the divergence code.
struct DivergenceError : Error {
    DivergenceError(const std::string& msg, double last_train, double last_val)
        : Error(msg), last_train_loss(last_train), last_val_loss(last_val) {}
    double last_train_loss;
    double last_val_loss;
};

}  // namespace gafm
