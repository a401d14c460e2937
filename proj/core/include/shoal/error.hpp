#pragma once

#include <stdexcept>
#include <string>

namespace shoal {

// Error taxonomy shared by every layer. Remote-side delivery failures are
// reported through diagnostics and error replies, never by throwing on the
// sender's thread; everything else throws ShoalError.
enum class ErrorCode {
    InvalidHeader,
    Oversize,
    Truncated,
    BadVersion,
    OutOfBounds,
    LengthMismatch,
    ParseError,
    ValidationError,
    ConfigInvalid,
    BindFailure,
    PeerUnreachable,
    UdpFragmentLimit,
    DuplicateKernel,
    NotLocal,
    ReservedId,
    DuplicateHandler,
    UnknownHandler,
    Timeout,
    Shutdown,
    HandlerRestriction,
    HaloTooLarge,
    IoError,
};

const char* to_string(ErrorCode code);

class ShoalError : public std::runtime_error {
  public:
    ShoalError(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

  private:
    ErrorCode code_;
};

}  // namespace shoal
