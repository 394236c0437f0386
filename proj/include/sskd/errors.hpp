#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sskd {

// Every failure the library reports derives from Error so callers can catch
// the whole family at the CLI boundary.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Raised when training diverges (NaN/inf metric or loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed binary input. offset() is the byte position where decoding failed.
class ParseError : public Error {
 public:
  ParseError(std::uint64_t offset, const std::string& what)
      : Error("at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace sskd
