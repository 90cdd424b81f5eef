#pragma once

#include <stdexcept>
#include <string>

namespace mclokd {

/// Precondition violated by a caller (bad shape, out-of-range index, ...).
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A memory bank holds no slot whose label differs from the anchor's.
class NoNegatives : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint failed its checksum or structural validation.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint is intact but was produced under a different model/config shape.
class IncompatibleCheckpoint : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Config document failed validation. `field()` names the offending key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Training produced a NaN/Inf loss. The message carries the component values.
class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mclokd
