#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gear {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A file or frame does not follow its binary layout. `offset` is the byte
/// position at which decoding stopped.
class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& what)
      : Error("format error at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// An adaptor patch was built against a different base model.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

/// A partially fine-tuned model changed outside its trainable layers.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required pipeline artifact is missing or unreadable.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace gear
