#pragma once

#include <stdexcept>
#include <string>

namespace spotlight {

// Shape or sizing preconditions (bad dimensions, k out of range).
class DimensionError : public std::invalid_argument {
public:
    explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed or truncated on-disk data.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite arithmetic is required.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Loss over an empty pair set.
class EmptyPairError : public std::runtime_error {
public:
    explicit EmptyPairError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace spotlight
