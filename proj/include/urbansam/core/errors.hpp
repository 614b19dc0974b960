#pragma once

#include <stdexcept>
#include <string>

namespace urbansam {

// Exit-code contract: 0 success, 2 config error, 3 data error, 4 numeric failure.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg, int code) : std::runtime_error(msg), exit_code(code) {}
    int exit_code;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg, 2) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg, 3) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error(msg, 3) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg, 4) {}
};

}  // namespace urbansam
