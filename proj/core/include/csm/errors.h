#pragma once

#include <stdexcept>
#include <string>

namespace csm {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Argument outside an operation's mathematical domain (log of a non-positive value, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// Violated precondition that is not a shape problem (non-scalar loss, empty input, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Two parameter vectors that should share a layout do not.
class LayoutMismatchError : public Error {
public:
    using Error::Error;
};

// The sampled mask mean fell below the rescale threshold.
class DegenerateMaskError : public Error {
public:
    using Error::Error;
};

// Bad magic, version, manifest, or checksum in a checkpoint file.
class CorruptFileError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace csm
