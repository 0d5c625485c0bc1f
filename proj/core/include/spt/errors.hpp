#pragma once

#include <stdexcept>
#include <string>

namespace spt {

enum class ErrorKind {
  dimension,       // shape / extent mismatch
  config,          // invalid or unknown configuration
  io,              // file system / format failures
  diverged,        // training produced a non-finite loss
  missing_prompt,  // decode requested with an empty prompt set
  no_defect,       // prompt derivation on an empty mask / region list
  degenerate,      // degenerate numeric input (all -inf slice, zero column norm, n < 2)
  unsupported,     // operation not defined for this kind (e.g. adapter merge)
  contract,        // API precondition violated (non-scalar loss, tape mixing)
  schema,          // checkpoint / config version or shape mismatch
  probe,           // non-finite value while probing finite differences
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

}  // namespace spt
