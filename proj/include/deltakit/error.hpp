#pragma once

#include <stdexcept>
#include <string>

namespace deltakit {

// Error categories. The CLI maps these onto exit codes:
// bad input -> 2, artifact incompatibility -> 3, everything else -> 1.
enum class errc {
    io,
    malformed_header,
    json_parse,
    bad_offsets,
    unsupported_dtype,
    shape_mismatch,
    name_mismatch,
    length_mismatch,
    bad_argument,
    bad_token,
    non_finite,
    no_convergence,
    duplicate_id,
    unknown_id,
};

class Error : public std::runtime_error {
public:
    Error(errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    errc code() const noexcept { return code_; }

private:
    errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& msg) {
    throw Error(code, msg);
}

inline void check(bool ok, errc code, const std::string& msg) {
    if (!ok) fail(code, msg);
}

} // namespace deltakit
