#pragma once

#include <stdexcept>
#include <string>

namespace qpat {

/// Failure categories. The CLI maps them onto process exit codes.
enum class ErrorKind { config, domain, dimension, numerical, io };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// 2 config/input, 3 numerical, 4 I/O.
  int exit_code() const noexcept {
    switch (kind_) {
    case ErrorKind::numerical: return 3;
    case ErrorKind::io: return 4;
    default: return 2;
    }
  }

private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& w) : Error(ErrorKind::domain, w) {}
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorKind::dimension, w) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::numerical, w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::io, w) {}
};

} // namespace qpat
