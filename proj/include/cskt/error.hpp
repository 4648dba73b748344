#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cskt {

/// Error categories. The CLI prints the category as a one-word prefix so
/// callers can dispatch on it without parsing the message.
enum class ErrorKind {
  Dimension,
  Vocabulary,
  Input,
  Config,
  Integrity,
  Capacity,
  Variant,
  Numeric,
  Io,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Vocabulary: return "vocabulary";
    case ErrorKind::Input: return "input";
    case ErrorKind::Config: return "config";
    case ErrorKind::Integrity: return "integrity";
    case ErrorKind::Capacity: return "capacity";
    case ErrorKind::Variant: return "variant";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace cskt
