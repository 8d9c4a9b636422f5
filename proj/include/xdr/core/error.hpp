#pragma once

#include <stdexcept>
#include <string>

namespace xdr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or argument shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf showed up where only finite values are allowed.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Attempt to mutate, or to train through, a frozen network.
class FrozenError : public Error {
 public:
  using Error::Error;
};

/// Invalid user input: parameters out of range, malformed files, bad configs.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace xdr
