#pragma once

#include <stdexcept>
#include <string>

namespace layerprobe {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes do not conform (rank or extent mismatch).
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A spec, hyperparameter, or layer configuration is invalid.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// An operation produced or encountered a non-finite value.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A class index, neuron id, or element index is out of range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Input data violates a documented contract (labels, empty corpus, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// A file does not conform to its declared on-disk format.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A caller violated an operation precondition.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// A run configuration or cross-file consistency check failed.
class ValidationError : public Error {
public:
    using Error::Error;
};

}  // namespace layerprobe
