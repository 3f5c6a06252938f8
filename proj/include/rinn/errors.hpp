#pragma once

#include <stdexcept>
#include <string>

namespace rinn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Channel count does not decompose as groups * period.
class LayoutError : public Error {
 public:
  using Error::Error;
};

// Invalid combination of construction parameters (e.g. p does not divide n).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input values outside their documented domain.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss or parameter.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Pipeline stages requested out of order.
class StageOrderError : public Error {
 public:
  using Error::Error;
};

// Random placement could not satisfy the non-overlap constraint.
class PackingError : public Error {
 public:
  using Error::Error;
};

// File format errors. Each failure mode has its own type so callers can
// distinguish a stale file from a corrupt one.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class MalformedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ShapeError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class RangeError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace rinn
