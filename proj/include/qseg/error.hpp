#pragma once

#include <stdexcept>
#include <string>

namespace qseg {

/// Error with a short machine-parsable class, e.g. "shape_mismatch".
/// The CLI prints "error:<code>: <message>" and exits nonzero.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const { return code_; }

private:
    std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, const std::string& code, const std::string& message) {
    if (!condition) fail(code, message);
}

}  // namespace qseg
