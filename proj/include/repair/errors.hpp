#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <utility>

namespace repair {

// Malformed or inconsistent input: bad files, wrong shapes, invalid parameters.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A computation left the finite range or hit a singular configuration.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using WarningHandler = std::function<void(const std::string&)>;

namespace detail {
inline WarningHandler& warning_handler() {
  static WarningHandler handler = [](const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return handler;
}
}  // namespace detail

// Installs a new sink for non-fatal diagnostics and returns the previous one.
inline WarningHandler set_warning_handler(WarningHandler handler) {
  return std::exchange(detail::warning_handler(), std::move(handler));
}

inline void warn(const std::string& msg) {
  if (detail::warning_handler()) detail::warning_handler()(msg);
}

}  // namespace repair
