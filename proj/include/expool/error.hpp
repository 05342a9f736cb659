#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace expool {

enum class ErrorCode {
    InvalidInput,
    UnknownDegradation,
    InvalidMetric,
    MetricSetMismatch,
    CandidateSetMismatch,
    NotEnoughCandidates,
    InvalidTieIntensity,
    DimensionError,
    DegenerateData,
    NumericalInstability,
    DegenerateEmbedding,
    OracleUnavailable,
    ConfigError,
    UnsupportedVersion,
    ParseError,
    InsufficientOverlap,
    ProfileNotStabilizable,
    ImageNotFound,
    UnknownTool,
    SpecError,
    TooLarge,
    ReplayMismatch,
};

std::string_view to_string(ErrorCode code);

// Every failure the engine reports carries one of the codes above.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace expool
