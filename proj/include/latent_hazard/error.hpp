#pragma once

#include <stdexcept>
#include <string>

namespace lh {

/// Error categories. The numeric values double as CLI exit codes.
enum class ErrorKind : int {
    config = 1,
    schema = 2,
    numerical = 3,
    io = 4,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

/// Bad parameters, violated preconditions, out-of-domain arguments.
struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

/// Column/variable problems and malformed cell contents.
struct SchemaError : Error {
    explicit SchemaError(const std::string& what) : Error(ErrorKind::schema, what) {}
};

/// Rank deficiency, singular matrices, failed selection.
struct NumericalError : Error {
    explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

/// Prefix an error message with the pipeline stage that raised it, keeping the kind.
inline Error with_stage(const Error& e, const std::string& stage) {
    return Error(e.kind(), "[" + stage + "] " + e.what());
}

}  // namespace lh
