#pragma once

#include <stdexcept>
#include <string>

namespace vicl {

// Base class for every error raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad or inconsistent configuration (CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// Dataset / file problems: missing inputs, malformed artifacts (CLI exit code 3).
struct DataError : Error {
    using Error::Error;
};

// Filesystem failure while reading or writing an artifact.
struct IoError : DataError {
    using DataError::DataError;
};

// A request exceeds what the data can provide (e.g. top-N beyond database size).
struct CapacityError : DataError {
    using DataError::DataError;
};

// Shape disagreement between tensors.
struct DimensionError : Error {
    using Error::Error;
};

// Out-of-range element or token index.
struct IndexError : Error {
    using Error::Error;
};

// An API precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Operation invoked in the wrong pipeline mode (e.g. augmentation at inference).
struct ModeError : Error {
    using Error::Error;
};

// Non-finite values or diverging optimization (CLI exit code 4).
struct NumericError : Error {
    using Error::Error;
};

// Backbone pretraining failed to reach its convergence gate.
struct PretrainError : NumericError {
    using NumericError::NumericError;
};

} // namespace vicl
