#pragma once

#include <stdexcept>
#include <string>

namespace sitt {

/// Invalid configuration or arguments. CLI exit code 2.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values or a failed numerical step. CLI exit code 3.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Requested work exceeds the compute guard. CLI exit code 4.
class BudgetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace sitt
