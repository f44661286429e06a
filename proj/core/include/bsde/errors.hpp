#pragma once

#include <stdexcept>
#include <string>

namespace bsde {

/// Invalid user-facing configuration (bad grid sizes, unknown keys, ...).
/// CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Violated internal contract between modules (dimension mismatch,
/// misaligned arrays, out-of-range level). CLI exit code 3.
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

/// Numerical failure (singular normal matrix, non-finite values).
/// CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem failure while persisting results. CLI exit code 4.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace bsde
