#pragma once

#include <stdexcept>
#include <string>

namespace lutq {

// Categories double as CLI exit codes.
enum class ErrorCategory : int {
    internal = 1,
    usage = 2,
    config = 3,
    data = 4,
    format = 5,
    shape = 6,
    numeric = 7,
    mode = 8,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& message)
        : std::runtime_error(message), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& message) {
    throw Error(category, message);
}

}  // namespace lutq
