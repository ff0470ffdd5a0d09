#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sapo {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed data handed to an operation (non-finite log-prob, bad distribution, ...).
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Out-of-range hyperparameters or an unusable configuration document.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A trajectory with no loss-bearing token.
class DegenerateTrajectory : public Error {
public:
    using Error::Error;
};

/// Operation called on an object in the wrong lifecycle state.
class InvalidState : public Error {
public:
    using Error::Error;
};

class EmptyQuery : public InvalidInput {
public:
    using InvalidInput::InvalidInput;
};

class NonFiniteGradient : public Error {
public:
    NonFiniteGradient(const std::string& what, std::size_t index)
        : Error(what), index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

}  // namespace sapo
