#pragma once
// Error taxonomy. The CLI maps these to exit codes: UsageError -> 2,
// InvariantViolation / ForbiddenError -> 3, everything else -> 1.
#include <stdexcept>
#include <string>

namespace flexmerge {

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct InputError : std::runtime_error {
    explicit InputError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

struct MergeError : std::runtime_error {
    explicit MergeError(const std::string& m) : std::runtime_error(m) {}
};

// Checkpoint load failures are distinct types so callers can tell a corrupt
// blob from a stale format from a bad fingerprint.
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};
struct FingerprintMismatch : CheckpointError {
    explicit FingerprintMismatch(const std::string& m) : CheckpointError(m) {}
};
struct TruncatedBlob : CheckpointError {
    explicit TruncatedBlob(const std::string& m) : CheckpointError(m) {}
};
struct VersionSkew : CheckpointError {
    explicit VersionSkew(const std::string& m) : CheckpointError(m) {}
};

// A broken internal contract (e.g. a frozen tensor drifted during training).
struct InvariantViolation : std::runtime_error {
    explicit InvariantViolation(const std::string& m) : std::runtime_error(m) {}
};

// Explicitly disallowed operation (e.g. opting out the public expert).
struct ForbiddenError : std::runtime_error {
    explicit ForbiddenError(const std::string& m) : std::runtime_error(m) {}
};

} // namespace flexmerge
