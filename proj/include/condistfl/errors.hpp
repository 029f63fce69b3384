#pragma once

#include <stdexcept>
#include <string>

namespace condistfl {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A numeric precondition failed (non-positive temperature, near-zero divisor, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the gradient tape (double backward, foreign tape, non-scalar loss).
class TapeError : public Error {
 public:
  using Error::Error;
};

class TopologyError : public Error {
 public:
  using Error::Error;
};

// Binary file errors. Each failure mode has its own type so callers can tell
// a stale file from a damaged one.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnknownParameterError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised when a federated run must stop (non-finite loss, client failure).
class TrainingAborted : public Error {
 public:
  using Error::Error;
};

}  // namespace condistfl
