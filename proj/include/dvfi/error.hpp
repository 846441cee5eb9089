#pragma once

#include <stdexcept>
#include <string>

namespace dvfi {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions that do not fit an operation.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// NaN/Inf produced by an op, or a diverging loss.
class NumericError : public Error {
public:
  using Error::Error;
};

/// Invalid argument or configuration value.
class ValidationError : public Error {
public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
public:
  using Error::Error;
};

/// File was read but its content is malformed.
class FormatError : public Error {
public:
  FormatError(const std::string& what, long line = -1)
      : Error(line >= 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}

  long line() const { return line_; }

private:
  long line_;
};

} // namespace dvfi
