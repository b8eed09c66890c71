#pragma once

#include <stdexcept>
#include <string>

namespace selat {

// Shape mismatch inside a tensor primitive.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration value or combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller violated an operation precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad data value handed to an operation (e.g. a label out of range).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File missing or unreadable; message carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace selat
