#pragma once

#include <stdexcept>
#include <string>

namespace divae {

// Error taxonomy shared by the library and the CLI. `kind()` is the
// machine-readable tag the CLI emits in its error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& msg)
        : std::runtime_error(msg), kind_(std::move(kind)) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape", msg) {}
};
struct RangeError : Error {
    explicit RangeError(const std::string& msg) : Error("range", msg) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error("index", msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};
struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error("validation", msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};
struct IngestionError : Error {
    explicit IngestionError(const std::string& msg) : Error("ingest", msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io", msg) {}
};

}  // namespace divae
