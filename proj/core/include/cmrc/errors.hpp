#pragma once

#include <stdexcept>
#include <string>

namespace cmrc {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shapes do not satisfy an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A precondition on values (not shapes) was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration (bad hyperparameter, inconsistent dims, bad flags).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent on-disk data (parse failures, row mismatches,
/// degenerate inputs such as all-zero expression rows).
class DataError : public Error {
public:
    using Error::Error;
};

/// Checkpoint / cache files that fail validation (magic, version, checksum).
class LoadError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf detected where finite values are guaranteed.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace cmrc
