#pragma once

#include <stdexcept>
#include <string>

namespace pmqve {

/// Base error for every recoverable failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The percentile-constrained lower and upper grids overlap, so no valid
/// (lb, ub) pair exists. Calibration catches this and falls back to min/max.
class SearchSpaceCollapsed : public Error {
 public:
  using Error::Error;
};

/// Internal consistency check failed; the CLI maps this to exit code 2.
class AssertionFailure : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace pmqve
