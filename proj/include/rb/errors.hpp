#pragma once

#include <stdexcept>
#include <string>

namespace rb {

// Error categories map 1:1 onto CLI exit codes: config -> 1, io -> 2,
// invariant -> 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvariantError : std::runtime_error {
    explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace rb
