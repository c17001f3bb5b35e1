#pragma once

#include <stdexcept>
#include <string>

namespace bitdance {

// Root of every error raised by the library. Callers that only need to report
// failures can catch this; the CLI maps the concrete kinds to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad argument values: non-finite latents, shape mismatches, empty batches.
class InvalidInput : public Error {
public:
    using Error::Error;
};

// Cross-field configuration violations (g does not divide d, unknown keys, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed on-disk data: bad magic, truncated payloads, oversize dimensions.
class FormatError : public Error {
public:
    using Error::Error;
};

// A file could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

// Two artifacts that cannot be combined (tokenizer/AR checkpoint mismatch).
class CompatibilityError : public Error {
public:
    using Error::Error;
};

// A loss or gradient became non-finite during training.
class TrainingDivergence : public Error {
public:
    using Error::Error;
};

}  // namespace bitdance
