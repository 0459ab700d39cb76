#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace stylebrush {

// Category of a failure. The CLI prints it as the machine-parsable prefix of
// its one-line error message and maps it to an exit code.
enum class ErrorKind {
    usage,       // bad arguments or out-of-range request parameters
    config,      // missing/invalid config file or unknown keys
    io,          // file system and image codec failures
    shape,       // tensor shape or dimension contract violated
    numeric,     // NaN/Inf or non-PSD beyond tolerance
    checkpoint,  // malformed or incompatible checkpoint container
    data,        // empty corpus, misaligned evaluation directories
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::usage: return "usage";
        case ErrorKind::config: return "config";
        case ErrorKind::io: return "io";
        case ErrorKind::shape: return "shape";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::checkpoint: return "checkpoint";
        case ErrorKind::data: return "data";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) throw Error(kind, message);
}

}  // namespace stylebrush
