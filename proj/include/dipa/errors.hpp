#pragma once

#include <stdexcept>
#include <string>

namespace dipa {

// Error taxonomy maps onto CLI exit codes:
//   UsageError -> 1, DataError/ShapeError -> 2, NumericalError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UsageError : Error {
    using Error::Error;
};

// Malformed files, bad containers, inconsistent pool indexes.
struct DataError : Error {
    using Error::Error;
};

// Dimension disagreements between tensors or against a config.
struct ShapeError : DataError {
    using DataError::DataError;
};

// NaN/Inf surfaced by a kernel, an adjoint, or the training loop.
struct NumericalError : Error {
    using Error::Error;
};

}  // namespace dipa
