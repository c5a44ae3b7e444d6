// Copyright (c) 2026, cptlab authors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every cptlab module. The CLI maps these onto
// process exit codes (see tools/cptlab.cpp).

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cptlab {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Configuration / argument problems detected before any compute.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Filesystem failures (open, write, rename).
class IoError : public Error {
public:
    using Error::Error;
};

// Bytes on disk are not in the expected container or text format.
class FormatError : public Error {
public:
    using Error::Error;
};

// Container is well-formed up front but its payload is truncated or inconsistent.
class CorruptionError : public Error {
public:
    using Error::Error;
};

// A value violates a structural invariant (shape/length, duplicates, finiteness).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Two parameter sets / tensors that must match in names, shapes and dtypes do not.
class CongruenceError : public Error {
public:
    using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

class LengthError : public Error {
public:
    using Error::Error;
};

class VocabError : public Error {
public:
    using Error::Error;
};

class CorpusError : public Error {
public:
    using Error::Error;
};

class SequencingError : public Error {
public:
    using Error::Error;
};

class CompositionError : public Error {
public:
    using Error::Error;
};

class MalformedExampleError : public Error {
public:
    using Error::Error;
};

class AlignmentError : public Error {
public:
    using Error::Error;
};

class FieldError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient during training.
class DivergenceError : public Error {
public:
    DivergenceError(std::int64_t step, const std::string& what)
        : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

    [[nodiscard]] std::int64_t step() const noexcept { return step_; }

private:
    std::int64_t step_;
};

} // namespace cptlab
