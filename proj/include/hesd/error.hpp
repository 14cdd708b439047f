#pragma once

#include <stdexcept>
#include <string>

namespace hesd {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor or parameter layout mismatch. `segment()` names the offending
/// parameter segment when one is known.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what, std::string segment = {})
      : Error(what), segment_(std::move(segment)) {}
  const std::string& segment() const { return segment_; }

 private:
  std::string segment_;
};

/// Non-finite value or failed numerical procedure.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value. `field()` is the dotted path of the field.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : Error(field + ": " + what), field_(field), detail_(what) {}
  const std::string& field() const { return field_; }
  /// The message without the field prefix.
  const std::string& detail() const { return detail_; }

 private:
  std::string field_;
  std::string detail_;
};

/// Corrupt or incompatible file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace hesd
