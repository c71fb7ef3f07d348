#pragma once

#include <stdexcept>
#include <string>

namespace pidg {

// Base for every failure the library reports. Callers that only need a
// diagnostic can catch this; tests match on the concrete subclasses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input outside an operation's accepted domain (coordinates, depths, times).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf was produced. The message names the offending tape node.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration or scene specification.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or unsupported on-disk data.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace pidg
