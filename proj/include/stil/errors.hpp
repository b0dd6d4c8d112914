#pragma once

#include <stdexcept>
#include <string>

namespace stil {

// Failure categories map onto CLI exit codes (see tools/stil.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid run configuration, unknown keys, inconsistent hyperparameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed input files: missing images, unknown categories, bad numbers.
class DataError : public Error {
public:
    using Error::Error;
};

// Non-finite losses and similar numerical breakdowns.
class NumericalError : public Error {
public:
    using Error::Error;
};

// Caller broke a precondition (shape mismatch, out-of-range index).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw ContractViolation(message);
    }
}

}  // namespace stil
