#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace forkscan {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidCommitId : public Error {
public:
    using Error::Error;
};

/// Raised for malformed input files. Carries the 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class GraphError : public ParseError {
public:
    using ParseError::ParseError;
};

class UnknownCommit : public Error {
public:
    using Error::Error;
};

}  // namespace forkscan
