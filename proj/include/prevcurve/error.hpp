#ifndef PREVCURVE_ERROR_HPP
#define PREVCURVE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace prevcurve {

enum class ErrorKind {
  InvalidArgument,  // malformed parameter or config value
  NotFound,         // unknown disease, location, dimension level
  EmptySubgroup,    // conditioning set carries zero weight
  TooManyLevels,    // stratification beyond the five-curve cap
  InputError,       // unreadable or inconsistent input files
  StoreCorrupt,     // magic/version/digest/truncation failures
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "INVALID-ARGUMENT";
    case ErrorKind::NotFound: return "NOT-FOUND";
    case ErrorKind::EmptySubgroup: return "EMPTY-SUBGROUP";
    case ErrorKind::TooManyLevels: return "TOO-MANY-LEVELS";
    case ErrorKind::InputError: return "INPUT-ERROR";
    case ErrorKind::StoreCorrupt: return "STORE-CORRUPT";
  }
  return "UNKNOWN";
}

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace prevcurve

#endif  // PREVCURVE_ERROR_HPP
