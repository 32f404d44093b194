#pragma once

#include <stdexcept>
#include <string>

namespace ltn {

/// Raised when a caller breaks an operation's precondition (shape, range, size).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Base for everything that can go wrong reading a binary container.
class FileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Wrong magic bytes or otherwise malformed content.
class FormatError : public FileError {
 public:
  using FileError::FileError;
};

class VersionError : public FileError {
 public:
  using FileError::FileError;
};

class TruncatedError : public FileError {
 public:
  using FileError::FileError;
};

/// Stored derived data disagrees with what the stored inputs imply.
class ConsistencyError : public FileError {
 public:
  using FileError::FileError;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A training loss became non-finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ltn
