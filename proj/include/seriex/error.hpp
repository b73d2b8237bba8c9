#pragma once

#include <stdexcept>
#include <string>

namespace seriex {

/// Failure categories. The CLI maps each one onto a stable exit code.
enum class ErrorKind {
  Io,               // file missing, unreadable, unwritable
  Format,           // bad magic, malformed header, payload length mismatch
  Unsupported,      // unknown dtype, unsupported layer kind
  InvalidArgument,  // violated precondition on a value
  ShapeMismatch,    // incomposable shapes, dimension mismatch
  NonFinite,        // NaN / Inf in numeric input
  Overflow,         // integer accumulator guard tripped
  Assertion,        // a runtime check on results failed
};

inline const char* error_kind_name(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Io: return "io";
    case ErrorKind::Format: return "format";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::NonFinite: return "non-finite";
    case ErrorKind::Overflow: return "overflow";
    case ErrorKind::Assertion: return "assertion";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace seriex
