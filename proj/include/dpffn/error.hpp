#pragma once

#include <stdexcept>
#include <string>

namespace dpffn {

// Base error type. Subclasses map onto the CLI exit-code contract
// (usage = 1, data = 2, numeric = 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace dpffn
