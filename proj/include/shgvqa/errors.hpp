#pragma once

#include <stdexcept>
#include <string>

namespace shgvqa {

// Input-side failures: bad config files, malformed datasets, unknown labels.
// The CLI maps these to exit code 1; everything else that throws maps to 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : ValidationError {
    explicit ConfigError(const std::string& msg) : ValidationError(msg) {}
};

struct SchemaError : ValidationError {
    explicit SchemaError(const std::string& msg) : ValidationError(msg) {}
};

struct VocabError : ValidationError {
    explicit VocabError(const std::string& msg) : ValidationError(msg) {}
};

}  // namespace shgvqa
