// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace rlvrsim {

/// Precondition violated on a pure numeric operation (empty input, shape mismatch, ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Non-finite value where a finite one is required. Carries the context that produced it.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, std::string context = {})
        : std::runtime_error(what), context_(std::move(context)) {}

    const std::string& context() const noexcept { return context_; }

private:
    std::string context_;
};

/// Invalid configuration. `key()` names the offending (dotted) key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& msg)
        : std::runtime_error(key.empty() ? msg : key + ": " + msg), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A persisted artifact failed its integrity check (bad magic, size, or checksum).
class IntegrityError : public IoError {
public:
    using IoError::IoError;
};

}  // namespace rlvrsim
