#pragma once

#include <stdexcept>
#include <string>

namespace soup {

// Process exit codes used by the CLI. Every library error maps onto one of them.
enum class ExitCode : int {
    kOk = 0,
    kUsage = 1,
    kData = 2,
    kTraining = 3,
    kCompatibility = 4,
    kIo = 5,
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ExitCode::kUsage, "config error: " + w) {}
};
struct DimensionError : Error {
    explicit DimensionError(const std::string& w) : Error(ExitCode::kUsage, "dimension error: " + w) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& w) : Error(ExitCode::kData, "numeric error: " + w) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& w) : Error(ExitCode::kData, "index error: " + w) {}
};
struct DataError : Error {
    explicit DataError(const std::string& w) : Error(ExitCode::kData, "data error: " + w) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& w) : Error(ExitCode::kData, "format error: " + w) {}
};
struct TrainingError : Error {
    TrainingError(const std::string& w, long step)
        : Error(ExitCode::kTraining, "training error at step " + std::to_string(step) + ": " + w), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};
struct CompatibilityError : Error {
    explicit CompatibilityError(const std::string& w) : Error(ExitCode::kCompatibility, "compatibility error: " + w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ExitCode::kIo, "io error: " + w) {}
};

}  // namespace soup
