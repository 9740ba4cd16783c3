#pragma once

#include <stdexcept>
#include <string>

namespace racap {

/// Process exit codes used by the command-line front end.
enum class ExitCode : int {
  kSuccess = 0,
  kFailure = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kFailure; }
};

/// Tensor dimensions that do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

/// Malformed or inconsistent input data (manifests, archives, labels).
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kData; }
};

/// Binary format violation; the message carries the byte offset.
class FormatError : public DataError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// NaN/Inf encountered during training.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumeric; }
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace racap
