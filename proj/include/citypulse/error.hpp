#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace citypulse {

// Base of every error thrown by the library. Each subclass maps to a
// distinct CLI exit code (see tools/citypulse_main.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class StorageError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ConflictError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

class BackpressureError : public Error {
public:
    BackpressureError(int attempts, const std::string& what)
        : Error(what + " (after " + std::to_string(attempts) + " attempts)"), attempts_(attempts) {}

    int attempts() const noexcept { return attempts_; }

private:
    int attempts_;
};

class InsufficientDataError : public Error {
public:
    using Error::Error;
};

class DegenerateClusteringError : public Error {
public:
    using Error::Error;
};

// Request validation failure; carries the offending wire field name.
class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& what)
        : Error(what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class InvariantViolation : public Error {
public:
    using Error::Error;
};

} // namespace citypulse
