#pragma once

#include <stdexcept>
#include <string>

namespace brainstrip {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unsupported file content. The message names the offending
/// header field or section.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A precondition on an argument or a volume was violated.
class ValueError : public Error {
public:
    using Error::Error;
};

/// Filesystem-level failure: missing path, unwritable file, short read.
class IoError : public Error {
public:
    using Error::Error;
};

/// Numerical failure during optimization (non-finite loss etc.).
class TrainingError : public Error {
public:
    using Error::Error;
};

}  // namespace brainstrip
