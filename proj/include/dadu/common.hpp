#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace dadu {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
struct ShapeError : Error {
  using Error::Error;
};

// Bad argument or out-of-range data value.
struct ValueError : Error {
  using Error::Error;
};

// File missing or unreadable.
struct IoError : Error {
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

// Config file problem; carries the offending line number (1-based, 0 = file-level).
struct ConfigError : Error {
  ConfigError(const std::string& msg, int line_no = 0) : Error(msg), line(line_no) {}
  int line;
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

}  // namespace dadu
