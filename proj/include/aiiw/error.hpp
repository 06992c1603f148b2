#pragma once

#include <stdexcept>
#include <string>

namespace aiiw {

/// Base of every error the library raises. `kind()` is a stable short tag
/// used by the CLI when writing structured error reports.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct DomainError : Error {
    explicit DomainError(const std::string& w) : Error("domain", w) {}
};

struct ArgumentError : Error {
    explicit ArgumentError(const std::string& w) : Error("argument", w) {}
};

struct DataError : Error {
    explicit DataError(const std::string& w) : Error("data", w) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& w) : Error("numeric", w) {}
};

// monotone partial likelihood: |gamma| ran past the divergence bound
struct MonotoneLikelihoodError : Error {
    explicit MonotoneLikelihoodError(const std::string& w) : Error("monotone_likelihood", w) {}
};

struct TiltOverflowError : Error {
    TiltOverflowError(double alpha, double mu, const std::string& w)
        : Error("tilt_overflow", w), alpha(alpha), mu(mu) {}
    double alpha;
    double mu;
};

struct EnvelopeError : Error {
    explicit EnvelopeError(const std::string& w) : Error("envelope", w) {}
};

struct InferenceError : Error {
    explicit InferenceError(const std::string& w) : Error("inference", w) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error("config", w) {}
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& w)
        : Error("parse", "line " + std::to_string(line) + ": " + w), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace aiiw
