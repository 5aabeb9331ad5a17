#pragma once

#include <stdexcept>
#include <string>

namespace calcquant {

enum class ErrorCode {
    invalid_argument = 1,
    io,
    format,
    domain,
    numeric,
    state,
    not_found,
};

/// Every failure inside the library is reported with one of these; the C API
/// maps the code onto its status enum.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) fail(code, message);
}

} // namespace calcquant
