#pragma once

#include <stdexcept>
#include <string>

namespace ptq {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind {
    config = 1,   // invalid parameters, malformed configuration
    data = 2,     // shape mismatches, malformed files, degenerate inputs
    numeric = 3,  // non-finite intermediates, divergence
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_config(const std::string& msg) { throw Error(ErrorKind::config, msg); }
[[noreturn]] inline void throw_data(const std::string& msg) { throw Error(ErrorKind::data, msg); }
[[noreturn]] inline void throw_numeric(const std::string& msg) { throw Error(ErrorKind::numeric, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) throw Error(kind, msg);
}

}  // namespace ptq
