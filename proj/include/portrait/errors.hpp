#pragma once

#include <stdexcept>
#include <string>

namespace portrait {

enum class ErrorCode {
    NoFaceFound,
    DimensionMismatch,
    DegenerateInput,
    IndexOutOfRange,
    InvalidSteps,
    FrozenParameterMutation,
    CaptionerUnavailable,
    UnreadableImage,
    InsufficientSamples,
    IOFailure,
    CheckpointNotFound,
    UnknownAxis,
    ConfigError,
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::NoFaceFound: return "NoFaceFound";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::DegenerateInput: return "DegenerateInput";
        case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
        case ErrorCode::InvalidSteps: return "InvalidSteps";
        case ErrorCode::FrozenParameterMutation: return "FrozenParameterMutation";
        case ErrorCode::CaptionerUnavailable: return "CaptionerUnavailable";
        case ErrorCode::UnreadableImage: return "UnreadableImage";
        case ErrorCode::InsufficientSamples: return "InsufficientSamples";
        case ErrorCode::IOFailure: return "IOFailure";
        case ErrorCode::CheckpointNotFound: return "CheckpointNotFound";
        case ErrorCode::UnknownAxis: return "UnknownAxis";
        case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

    ErrorCode code() const { return code_; }

    // Index of the offending element for per-item failures (e.g. which
    // reference image had no detectable face). -1 when not applicable.
    int index = -1;

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& what, int index = -1) {
    Error e(code, what);
    e.index = index;
    throw e;
}

}  // namespace portrait
