#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace protopart {

/// Invalid configuration or missing mode inputs. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input data failed validation. Carries an itemized list of problems.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what, std::vector<std::string> items = {})
        : std::runtime_error(what), items_(std::move(items)) {}

    const std::vector<std::string>& items() const noexcept { return items_; }

private:
    std::vector<std::string> items_;
};

/// Non-finite values or divergence during computation. Maps to exit code 2.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File I/O or format problems.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace protopart
