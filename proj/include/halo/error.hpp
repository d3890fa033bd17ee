#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace halo {

// Every failure surfaced by the library carries one of these codes so callers
// (notably the CLI) can map errors onto exit statuses without string matching.
enum class ErrorCode {
  MalformedRecord,
  MissingField,
  EmptyDataset,
  UnparseableLabel,
  InvalidConfig,
  MissingContext,
  InsufficientPool,
  TransportError,
  HttpStatus,
  ExhaustedRetries,
  MissingCredential,
  UndecidableDistribution,
  DigestMismatch,
  BackendFailure,
  FailureRateExceeded,
  NoCandidates,
  InvalidOverride,
  MisalignedIds,
  NoSets,
  MissingGold,
  RunLocked,
  IoError,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace halo
