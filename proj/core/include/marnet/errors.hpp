#pragma once

#include <stdexcept>
#include <string>

namespace marnet {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model or layer configuration, detected at build time.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Incompatible tensor shapes or extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed input files, manifests or dataset trees.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace marnet
