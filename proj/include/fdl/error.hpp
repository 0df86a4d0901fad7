#ifndef FDL_ERROR_HPP
#define FDL_ERROR_HPP

#include <stdexcept>
#include <string>

namespace fdl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by a forward or backward pass, or a diverged loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A required input (checkpoint, attached extension, config) is missing or
// incompatible. The CLI maps this to exit code 2.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

}  // namespace fdl

#endif  // FDL_ERROR_HPP
