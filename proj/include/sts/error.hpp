// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace sts {

// Violated precondition or internal invariant. Maps to CLI exit code 2.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Bad user-supplied data (token ids, sample lengths, files). Exit code 1.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Sequence or cache would exceed its configured capacity.
class CapacityError : public InputError {
public:
    using InputError::InputError;
};

class ConfigError : public InputError {
public:
    using InputError::InputError;
};

enum class LoadErrorKind {
    UnsupportedVersion,
    TruncatedBlob,
    ChecksumMismatch,
    Malformed,
    InvalidContent,
};

class LoadError : public InputError {
public:
    LoadError(LoadErrorKind kind, const std::string& what)
        : InputError(what), kind_(kind) {}

    LoadErrorKind kind() const noexcept { return kind_; }

private:
    LoadErrorKind kind_;
};

namespace detail {

[[noreturn]] inline void contract_failure(const char* cond, const std::string& msg) {
    throw ContractViolation(msg.empty() ? std::string("contract violated: ") + cond : msg);
}

}  // namespace detail

}  // namespace sts

#define STS_EXPECTS(cond, msg)                                \
    do {                                                      \
        if (!(cond)) ::sts::detail::contract_failure(#cond, (msg)); \
    } while (0)
