#pragma once

#include <stdexcept>
#include <string>

namespace sidial {

/// Error raised by every module. `kind` is a stable machine-readable tag
/// (e.g. "generation", "pool", "config") that the CLI reports verbatim.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

}  // namespace sidial
