#pragma once

#include <stdexcept>
#include <string>

namespace semab {

/// Exception carrying a short machine-readable code next to the message.
/// Codes are stable identifiers such as "shape_mismatch" or "truncated_record".
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace semab
