#pragma once

#include <stdexcept>
#include <string>

namespace avglm {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not satisfy an op's contract.
struct DimensionError : Error {
  using Error::Error;
};

// An index (token id, target id, row) is out of range.
struct IndexError : Error {
  using Error::Error;
};

// An API precondition was violated (empty input, non-scalar loss, ...).
struct ContractError : Error {
  using Error::Error;
};

// A batch carries no loss-contributing positions.
struct DegenerateBatchError : Error {
  using Error::Error;
};

// Corpus ingestion / file format problems.
struct DataError : Error {
  using Error::Error;
};

// Filesystem-level failures.
struct IoError : Error {
  using Error::Error;
};

// Non-finite values showed up where finite ones are required.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace avglm
