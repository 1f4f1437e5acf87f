#pragma once

#include <stdexcept>
#include <string>

namespace ksaem {

/// Invalid argument or out-of-domain input (bad box, unknown kind, ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Emulator fitting failed (rank-deficient regressors, duplicate design points,
/// non-finite likelihood everywhere on the search interval).
class FitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A covariance that must be positive (semi-)definite is not, beyond tolerance.
class NumericalHealthError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// ODE integration produced a non-finite or clearly negative state.
class SolverError : public std::runtime_error {
public:
    SolverError(const std::string& what, double t) : std::runtime_error(what), time_(t) {}
    double time() const noexcept { return time_; }

private:
    double time_;
};

/// Requested computation exceeds a configured resource cap.
class ResourceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Feature combination not supported (e.g. quadrature for d > 2).
class UnsupportedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// SAEM produced non-finite population parameters.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, int iteration)
        : std::runtime_error(what), iteration_(iteration) {}
    int iteration() const noexcept { return iteration_; }

private:
    int iteration_;
};

/// Configuration file violates the schema. `key_path` names the offending key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& key_path, const std::string& what)
        : std::runtime_error(key_path + ": " + what), key_path_(key_path) {}
    const std::string& key_path() const noexcept { return key_path_; }

private:
    std::string key_path_;
};

}  // namespace ksaem
