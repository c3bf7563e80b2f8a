#pragma once

#include <stdexcept>
#include <string>

namespace heparl {

// Error categories raised by the library. Each maps onto one process exit
// code so the command layer never has to inspect message text.
enum class Errc {
  domain,              // numeric argument outside an operation's domain
  fit,                 // degenerate sample for a fitted quantity
  sampling,            // replay-buffer request that cannot be met
  ingestion,           // malformed or unsupported input row
  config,              // bad configuration value
  feature_loss,        // a canonical feature would be dropped by the pipeline
  imputation,          // no donor rows for a feature
  shape,               // tensor/architecture mismatch
  usage,               // API misuse (stale cache, bad call order)
  training,            // training cannot proceed
  evaluation,          // off-policy evaluation precondition violated
  undefined_estimate,  // every importance weight is zero
  internal,            // pipeline invariant violated
  io,                  // file system failure
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// 0 success, 2 usage/input error, 3 pipeline-invariant violation,
// 4 evaluation undefined.
inline int exit_code(Errc code) noexcept {
  switch (code) {
    case Errc::feature_loss:
    case Errc::internal:
    case Errc::training:
    case Errc::imputation:
      return 3;
    case Errc::undefined_estimate:
      return 4;
    default:
      return 2;
  }
}

const char* errc_name(Errc code) noexcept;

}  // namespace heparl
