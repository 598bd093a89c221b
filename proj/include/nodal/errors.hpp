#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nodal {

// Base of every error thrown by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IngestionError : public Error {
public:
    IngestionError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    explicit IngestionError(const std::string& what) : Error(what) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_ = 0;
};

class NumericalError : public Error {
public:
    NumericalError(const std::string& what, long where = -1)
        : Error(what), where_(where) {}

    // Layer index for encoder failures, input index for accumulation failures, -1 otherwise.
    long where() const noexcept { return where_; }

private:
    long where_;
};

class ApertureError : public Error {
public:
    using Error::Error;
};

// Checkpoint failures: each kind is a distinct type.
class FormatError : public Error {
public:
    using Error::Error;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class ShapeMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

// A CLI step was invoked before the step that produces its inputs.
class PrerequisiteError : public Error {
public:
    using Error::Error;
};

}  // namespace nodal
