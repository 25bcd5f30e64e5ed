#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stgnn {

/// Malformed text input. Carries the 1-based line (or CSV row) number.
class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Well-formed input that violates a semantic rule (dangling reference, phase mismatch, ...).
class SemanticError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

class GraphConstructionError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

class SchemaError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace stgnn
