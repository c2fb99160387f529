#pragma once

#include <stdexcept>
#include <string>

namespace s3charq {

/// Base for every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or dimension disagreement between a network, a tensor, or a config.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Bad checkpoint header, truncated tensor data, or a K/k mismatch on load.
class CheckpointError : public Error {
public:
    using Error::Error;
};

/// NaN loss or gradient during training.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// Raw image or frame bytes that do not follow the documented layout.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Caller broke an operation precondition (non-scalar loss, missing round-2 score, ...).
class UsageError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

}  // namespace s3charq
