#pragma once

#include <stdexcept>
#include <string>

namespace sdcs {

// Base for every error thrown by the library. Callers that only care about
// "something went wrong in sdcs" can catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor / image dimensions do not agree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf appeared where finite numbers are required (training divergence).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file, bad magic, truncated payload, unknown config key...
class FormatError : public Error {
 public:
  using Error::Error;
};

// Input data that is well-formed but cannot be used (single class, empty
// mask, infeasible packing).
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace sdcs
