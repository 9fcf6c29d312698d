#pragma once

#include <stdexcept>
#include <string>

namespace tlm {

// Every failure the toolkit reports derives from Error so callers can catch
// one type at process boundaries while tests can pin the precise kind.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class PlanError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A configuration file that cannot be accepted; the message names the offending field.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace tlm
