#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace cdnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are inconsistent with an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text payload; carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Invalid configuration value; `field()` is the dotted path of the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)), message_(message) {}

  const std::string& field() const noexcept { return field_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string field_;
  std::string message_;
};

/// Edit value outside the configured editing interval.
class EditRangeError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdnet
