#pragma once

#include <stdexcept>
#include <string>

namespace snf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A pivot fell below the singularity threshold during LU factorization.
class SingularMatrix : public Error {
 public:
  using Error::Error;
};

/// Materializing an explicit matrix would exceed the configured size guard.
class SizeGuardExceeded : public Error {
 public:
  using Error::Error;
};

class NoConvergence : public Error {
 public:
  using Error::Error;
};

class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionMismatch : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Training produced a non-finite or runaway loss.
class Divergence : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace snf
