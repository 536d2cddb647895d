#pragma once

#include <stdexcept>
#include <string>

namespace nxfr {

/// Root of every exception thrown by the library. Messages are prefixed
/// with the module that raised them ("tensor: ...", "checkpoint: ...").
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not agree with what a kernel or layer expects.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Out-of-range configuration or argument value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Unusable dataset: missing class directories, empty corpus, bad labels.
class DatasetError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class UnsupportedVersionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class FingerprintMismatchError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

/// Declared blob lengths and the bytes actually present disagree.
class CorruptCheckpointError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

/// A training-loop invariant was violated (frozen parameters moved,
/// missing trace, ...). Indicates a bug rather than bad input.
class InvariantError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public InvariantError {
public:
    using InvariantError::InvariantError;
};

} // namespace nxfr
