#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fdm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Malformed or corrupt byte stream. `offset` is the byte position where
// decoding stopped.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

// Non-finite values appeared in a loss or gradient.
class DivergenceError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

} // namespace fdm
