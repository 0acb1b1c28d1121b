#pragma once

#include <stdexcept>
#include <string>

namespace schedlab {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition or shape contract violated by the caller.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A forward or backward computation produced NaN or Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Filesystem, format or integrity failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Operation called in a state that forbids it (e.g. a consumed tape).
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace schedlab
