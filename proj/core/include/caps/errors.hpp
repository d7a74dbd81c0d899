#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace caps {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on a non-shape argument was violated (bad index, R_iter = 0, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Dataset ingestion problem: missing files, empty classes, undecodable images.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text container. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// NaN or Inf showed up in a loss or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace caps
