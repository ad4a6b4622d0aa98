#pragma once

#include <stdexcept>
#include <string>

namespace safer {

// Error taxonomy mirrors the CLI exit codes: config -> 2, data/format -> 3,
// everything else that escapes -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RegistryError : std::runtime_error {
    explicit RegistryError(const std::string& msg) : std::runtime_error(msg) {}
};

struct VersionError : std::runtime_error {
    explicit VersionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace safer
