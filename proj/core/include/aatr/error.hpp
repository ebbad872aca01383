#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aatr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad shapes, out-of-range hyperparameters, invalid
/// attack/norm pairings, unbalanced or incompatible task inputs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// A NaN or Inf crossed an op boundary.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public NonFiniteError {
 public:
  DivergenceError(std::size_t epoch, const std::string& what)
      : NonFiniteError(what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed container: wrong magic, inconsistent metadata.
class BadFormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Container shorter than its header or metadata claims.
class TruncatedError : public BadFormatError {
 public:
  TruncatedError(std::size_t expected, std::size_t actual, const std::string& what)
      : BadFormatError(what + " (expected " + std::to_string(expected) + " bytes, got " +
                       std::to_string(actual) + ")"),
        expected_(expected),
        actual_(actual) {}
  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

/// A dataset or checkpoint refers to a victim that does not match.
class CheckpointMismatchError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace aatr
