#include "threadcomm/error.hpp"

namespace threadcomm {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::InvalidState: return "invalid state";
    case ErrorCode::InvalidHandle: return "invalid handle";
    case ErrorCode::TooManyThreads: return "too many threads";
    case ErrorCode::PendingOperations: return "pending operations";
    case ErrorCode::Truncation: return "message truncated";
    case ErrorCode::Transport: return "transport error";
    case ErrorCode::Protocol: return "protocol error";
  }
  return "unknown error";
}

}  // namespace threadcomm
