#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vk {

enum class ErrorCode {
    format,
    unsupported_type,
    rank,
    io,
    domain,
    scale,
    shape,
    config,
    dimension,
    arity,
    infeasible_sampling,
    integrity,
    incompatible,
    spec,
    undefined_distance,
    non_finite,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the toolkit. The code lets callers (the CLI in
/// particular) distinguish error families without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + " error: " + message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace vk
