#pragma once

#include <stdexcept>
#include <string>

namespace arimg {

// Base for every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated a documented precondition (bad argument, bad config value).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes do not satisfy an op's shape rule.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Op kind is not part of the catalog.
class CatalogError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Malformed input data or files (TSV, checkpoints, manifests, PNG).
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or another numeric breakdown detected.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace arimg
