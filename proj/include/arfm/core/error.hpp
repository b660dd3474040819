#pragma once

#include <stdexcept>
#include <string>

namespace arfm {

// Broad failure categories; the CLI prints these as machine-parseable codes.
enum class ErrorKind {
  kInvalidArgument,
  kIo,
  kShape,
  kNumeric,
  kFormat,
  kConfig,
  kBudget,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kBudget: return "budget";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define ARFM_CHECK(cond, kind, msg)                 \
  do {                                              \
    if (!(cond)) throw ::arfm::Error((kind), (msg)); \
  } while (0)

}  // namespace arfm
