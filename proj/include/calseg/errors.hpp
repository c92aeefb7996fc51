#pragma once

#include <stdexcept>
#include <string>

namespace calseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed container (bad magic, header or payload length).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Well-formed container holding invalid values (NaN/Inf, non-binary masks).
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PlacementError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced by a numeric stage.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace calseg
