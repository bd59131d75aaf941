#pragma once

#include <stdexcept>
#include <string>

namespace mwe {

/// Invalid hyperparameter or configuration value.
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Input outside the mathematical domain of an operation (negative mass, mass mismatch, ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Non-finite values produced during an iterative solve.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or disconnected mesh.
class GeometryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File format / I/O failure.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace mwe
