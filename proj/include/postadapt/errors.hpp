// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace postadapt {

// Thrown on malformed input files; carries the 1-based line when known.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& file, long line, const std::string& what_arg)
        : std::runtime_error(file + ":" + std::to_string(line) + ": " + what_arg) {}
    explicit ParseError(const std::string& what_arg) : std::runtime_error(what_arg) {}
};

// Thrown when loaded or computed data violates a documented invariant.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimMismatch : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Step-1 sentinel: positive loss with a zero gradient norm means the loss was
// differentiated against a detached parameter snapshot instead of the live
// parameters; training would silently do nothing.
class ZeroGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace postadapt
