#pragma once

#include <stdexcept>
#include <string>

namespace flora {

/// Tensor or model shapes do not line up.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed input data: bad CSV rows, corrupt model files, unknown labels.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A model file that cannot be parsed (bad magic, unsupported version, truncation).
class FormatError : public DataError {
public:
    using DataError::DataError;
};

/// Lookup of a key that does not exist.
class NotFoundError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// NaN/Inf encountered during training, usually a diverging learning rate.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace flora
