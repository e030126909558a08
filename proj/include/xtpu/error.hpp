#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xtpu {

enum class ErrorKind {
  parse,         // malformed file or document
  dimension,     // shape/width mismatch
  range,         // value outside its representable or legal range
  unsupported,   // operation not defined for this input (e.g. accuracy on regression data)
  domain,        // math domain violation (v_dd <= vth, ...)
  insufficient,  // not enough data for a fit or estimate
  config,        // bad run configuration
  io,            // file missing / unreadable / unwritable
  too_large,     // problem exceeds an enumeration limit
  internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::parse: return "parse";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::range: return "range";
    case ErrorKind::unsupported: return "unsupported";
    case ErrorKind::domain: return "domain";
    case ErrorKind::insufficient: return "insufficient";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::too_large: return "too_large";
    case ErrorKind::internal: return "internal";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace xtpu
