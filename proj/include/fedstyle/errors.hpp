#pragma once

#include <stdexcept>
#include <string>

namespace fedstyle {

// Root of every error raised by the library. Subclasses name the failed contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input that has no well-defined result (zero-norm rows, non-finite values).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// A batch or dataset cannot satisfy a P x K sampling request.
class SamplingError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class EvalError : public Error {
 public:
  using Error::Error;
};

class SplitError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedstyle
