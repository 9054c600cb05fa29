#pragma once

#include <stdexcept>
#include <string>

namespace asge {

// Every error carries a short machine-parseable category that the CLI prints
// as the prefix of its one-line failure message.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

// Inconsistent shapes, geometry or architecture.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config-error", what) {}
};

// Bad data values handed to an operation (labels out of range, ...).
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("input-error", what) {}
};

// Malformed files: IDX, CIFAR, checkpoints.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format-error", what) {}
};

// Operation invoked in a state that does not allow it.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage-error", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io-error", what) {}
};

// Non-finite loss during training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric-error", what) {}
};

}  // namespace asge
