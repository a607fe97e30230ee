#pragma once

#include <stdexcept>
#include <string>

namespace bus {

// Error taxonomy used across the library. All derive from std::runtime_error
// so callers can catch broadly; the CLI maps ConfigError to exit code 2 and
// everything else to 1.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct StateError : std::runtime_error {
    explicit StateError(const std::string& msg) : std::runtime_error("state error: " + msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

struct EnvError : std::runtime_error {
    explicit EnvError(const std::string& msg) : std::runtime_error("environment error: " + msg) {}
};

} // namespace bus
