#pragma once

#include <stdexcept>
#include <string>

namespace tmae {

// Base of every error raised by the library. The CLI maps the concrete
// subtype onto its exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/Inf or divergence.
class NumericalError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Checkpoint file errors. Each failure mode is a distinct type.
class CorruptFileError : public IoError {
public:
    using IoError::IoError;
};

class VersionMismatchError : public IoError {
public:
    using IoError::IoError;
};

class ShapeMismatchError : public IoError {
public:
    using IoError::IoError;
};

}  // namespace tmae
