// Exception types shared by every rapnet module.
#pragma once

#include <stdexcept>
#include <string>

namespace rapnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor ranks or extents disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Every key of some batch entry is masked out.
class InvalidMaskError : public Error {
 public:
  using Error::Error;
};

/// Long-memory buffer already holds its capacity.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Operation called on state it cannot act on (e.g. an empty memory).
class StateError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced; the message names the layer or gate.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file: bad magic, truncation, overflowing dimensions.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Configuration or input data that violates a documented contract.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace rapnet
