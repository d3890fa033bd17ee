#include "halo/error.hpp"

namespace halo {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::MissingField: return "MissingField";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::UnparseableLabel: return "UnparseableLabel";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MissingContext: return "MissingContext";
    case ErrorCode::InsufficientPool: return "InsufficientPool";
    case ErrorCode::TransportError: return "TransportError";
    case ErrorCode::HttpStatus: return "HttpStatus";
    case ErrorCode::ExhaustedRetries: return "ExhaustedRetries";
    case ErrorCode::MissingCredential: return "MissingCredential";
    case ErrorCode::UndecidableDistribution: return "UndecidableDistribution";
    case ErrorCode::DigestMismatch: return "DigestMismatch";
    case ErrorCode::BackendFailure: return "BackendFailure";
    case ErrorCode::FailureRateExceeded: return "FailureRateExceeded";
    case ErrorCode::NoCandidates: return "NoCandidates";
    case ErrorCode::InvalidOverride: return "InvalidOverride";
    case ErrorCode::MisalignedIds: return "MisalignedIds";
    case ErrorCode::NoSets: return "NoSets";
    case ErrorCode::MissingGold: return "MissingGold";
    case ErrorCode::RunLocked: return "RunLocked";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace halo
