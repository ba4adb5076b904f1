#pragma once

#include <stdexcept>
#include <string>

namespace mapbert {

/// Failure categories; the CLI maps each to its exit code.
enum class ErrorKind {
  kConfig = 2,
  kData = 3,
  kDivergence = 4,
  kEval = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

/// Invalid input data: bad labels, geometry mismatches, corrupt files.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

/// Operand shapes do not fit the operation.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(ErrorKind::kDivergence, what) {}
};

class EvalError : public Error {
 public:
  explicit EvalError(const std::string& what) : Error(ErrorKind::kEval, what) {}
};

}  // namespace mapbert
