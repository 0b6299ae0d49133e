#pragma once

#include <stdexcept>
#include <string>

namespace rangegen {

// Error taxonomy shared by the library and the CLI. The CLI maps each class
// to a stable process exit code (see tools/rangegen_main.cpp).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointMismatchError : std::runtime_error {
    explicit CheckpointMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InsufficientDataError : std::runtime_error {
    explicit InsufficientDataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegeneratePointError : std::domain_error {
    explicit DegeneratePointError(const std::string& msg) : std::domain_error(msg) {}
};

struct OutOfFovError : std::domain_error {
    explicit OutOfFovError(const std::string& msg) : std::domain_error(msg) {}
};

}  // namespace rangegen
