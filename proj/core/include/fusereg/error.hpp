#pragma once

#include <stdexcept>
#include <string>

namespace fusereg {

// Base of every error thrown by the library. The CLI maps subclasses onto
// exit codes, so keep the hierarchy shallow.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible with the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A configuration (model, conv geometry, loss settings) is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An API precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or another numerical breakdown was detected.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A metric is mathematically undefined for its inputs (empty mask, all-folded field).
class MetricUndefinedError : public Error {
 public:
  using Error::Error;
};

// File-format level failures.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnknownDtypeError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fusereg
