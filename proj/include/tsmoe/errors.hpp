// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tsmoe {

/// Invalid configuration or violated precondition on user-supplied settings.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN/Inf produced by a computation that must stay finite.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unreadable file (dataset, checkpoint, centroid file).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File that cannot be opened, read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace tsmoe
