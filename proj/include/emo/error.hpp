#pragma once

#include <stdexcept>
#include <string>

namespace emo {

// Bad inputs/configuration: the CLI maps this to exit code 1.
class InvalidInput : public std::runtime_error {
public:
    explicit InvalidInput(const std::string& what) : std::runtime_error(what) {}
};

// Failures during an otherwise valid run (I/O, child process, non-convergence):
// the CLI maps this to exit code 2.
class RuntimeFailure : public std::runtime_error {
public:
    explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

} // namespace emo
