#pragma once

#include <stdexcept>
#include <string>

namespace octproj {

// Error taxonomy shared by every module. All derive from Error so callers
// (notably the CLI) can map a whole family to one exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Precondition or single-use protocol violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// On-disk artifacts disagree with each other (meta vs slices, missing files).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace octproj
