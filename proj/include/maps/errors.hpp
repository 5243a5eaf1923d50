#pragma once

#include <stdexcept>
#include <string>

namespace maps {

// Error families map one-to-one onto CLI exit codes.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent inputs: bad tensors, missing names, empty datasets.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    IoError(const std::string& path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(path) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

}  // namespace maps
