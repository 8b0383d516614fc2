#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hnas {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape or rank violation. `axis()` is -1 when no single axis is at fault.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& what, int axis = -1)
      : Error(axis >= 0 ? what + " (axis " + std::to_string(axis) + ")" : what), axis_(axis) {}
  int axis() const noexcept { return axis_; }

 private:
  int axis_;
};

/// NaN/Inf where a finite value is required, or a diverged optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Binary or text parse failure. `offset()` is the byte (or line) position.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace hnas
