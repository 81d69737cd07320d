#pragma once

#include <stdexcept>
#include <string>

namespace malaria {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input violates a documented invariant or precondition.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed annotation or config document.
class ParseError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Placement or resource budget exhausted (synthetic generator).
class CapacityError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Bad configuration: unknown backend, missing weights, mode mismatch.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// File missing, unreadable or unwritable.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace malaria
