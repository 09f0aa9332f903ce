#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mosaic {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameters during training.
class Divergence : public Error {
 public:
  using Error::Error;
};

/// Malformed wire frame. `offset` is the byte position where decoding failed.
class FramingError : public Error {
 public:
  FramingError(const std::string& what, std::size_t offset)
      : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnknownMessageType : public FramingError {
 public:
  UnknownMessageType(unsigned type, std::size_t offset)
      : FramingError("unknown message type " + std::to_string(type), offset) {}
};

}  // namespace mosaic
