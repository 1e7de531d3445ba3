#pragma once

#include <stdexcept>
#include <string>

namespace cloak {

// Invalid caller input (bad shapes, out-of-range timesteps, odd batch sizes).
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration values.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated internal contract; indicates a programming error.
struct InternalError : std::logic_error {
    using std::logic_error::logic_error;
};

// Checkpoint content does not match its recorded digest.
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss during an optimization loop.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed structured input (run logs, manifests).
struct ParseError : std::runtime_error {
    ParseError(const std::string& what, int line)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line(line) {}
    int line;
};

// Failure inside a named pipeline stage; `stage` tags where it happened.
struct StageError : std::runtime_error {
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("[" + stage + "] " + what), stage(std::move(stage)) {}
    std::string stage;
};

}  // namespace cloak
