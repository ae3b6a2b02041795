#pragma once

#include <stdexcept>
#include <string>

namespace dtr {

// Base of everything thrown by the library. The CLI maps the subclasses
// onto distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration, split, or hyperparameter.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed or inconsistent input data (files, token ids, spans).
class DataError : public Error {
public:
    using Error::Error;
};

// Operands whose shapes do not fit the requested op.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient during training.
class NumericError : public Error {
public:
    using Error::Error;
};

// Lookup of an id that is not present (cache entries, parameters).
class NotFoundError : public Error {
public:
    using Error::Error;
};

}  // namespace dtr
