#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace m1lab {

enum class ErrorKind {
  kDimension,
  kParameter,
  kNumeric,
  kIndex,
  kConfig,
  kState,
  kData,
  kPolicy,
  kClassifier,
  kIo,
};

std::string_view error_kind_name(ErrorKind kind);

// Every library failure is raised as an Error carrying its category; the CLI
// maps categories onto exit codes and message prefixes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_kind_name(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kParameter: return "parameter";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kIndex: return "index";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kState: return "state";
    case ErrorKind::kData: return "data";
    case ErrorKind::kPolicy: return "policy";
    case ErrorKind::kClassifier: return "classifier";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

}  // namespace m1lab
