#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace terra {

// Thrown on shape/dimension violations. Messages carry both shapes involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when a forward op produces NaN/Inf from finite inputs, or when a
// training step observes a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Configuration / IO problems (bad config keys, missing files, bad ids).
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <typename... Args>
void require(bool cond, const Args&... args) {
  if (!cond) throw ShapeError(cat(args...));
}

}  // namespace terra
