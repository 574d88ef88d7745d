#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace mssdf {

/// Raised when an argument violates an operation's precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for I/O, format and state-restoration failures.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <class... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}
}  // namespace detail

template <class... Args>
inline void require(bool ok, Args&&... msg) {
  if (!ok) throw InvalidArgument(detail::concat(std::forward<Args>(msg)...));
}

}  // namespace mssdf
