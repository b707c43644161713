#pragma once

#include <stdexcept>
#include <string>

namespace ladabert {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument (fraction, rank, count) is outside its valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// An iterative numeric routine hit its iteration cap.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// A compression budget cannot be met; `slack` is the (non-positive) margin left
/// for the encoder after embedding and fixed parameters are paid for.
class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& what, double slack) : Error(what), slack_(slack) {}
  double slack() const noexcept { return slack_; }

 private:
  double slack_;
};

/// NaN/Inf encountered, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid model input (e.g. token id out of vocabulary).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Teacher and student traces cannot be aligned layer-by-layer.
class MappingError : public Error {
 public:
  using Error::Error;
};

/// I/O failure or malformed file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class MalformedManifestError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedBlobError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace ladabert
