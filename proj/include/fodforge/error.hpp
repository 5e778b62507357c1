#pragma once

#include <stdexcept>
#include <string>

namespace fodforge {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Arguments violate an operation's preconditions (shape, norm, range).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Inconsistent configuration: missing tissue, shell mismatch, bad spec.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed text or binary input.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Not enough volumes to satisfy a subsampling request.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Operation called on an object in the wrong state (e.g. eval-mode tape).
class InvalidState : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Should never happen; indicates a broken invariant.
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace fodforge
