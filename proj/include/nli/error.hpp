#pragma once

#include <stdexcept>
#include <string>

namespace nli {

// Base of every error raised by the library. The category decides the CLI
// exit code (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Arguments violate an operation precondition (e.g. every position masked).
class InvalidInputError : public Error {
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

// Malformed corpus or embedding content.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Corrupt or mismatched checkpoint contents.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// NaN / infinity encountered in loss or gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace nli
