#pragma once

#include <stdexcept>
#include <string>

namespace fmn {

/// Base class for every error raised by the library. Callers that only need
/// a message can catch this; the CLI maps the concrete kinds to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or matrix shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition on arguments or configuration was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Batch norm in train mode needs at least two samples.
class InvalidBatchError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Vector too close to zero to normalize.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

/// A query has no valid gallery match under the evaluation protocol.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (manifest, config, binary header).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf appeared where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fmn
