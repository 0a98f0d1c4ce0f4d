// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Mismatched tensor shapes / dimensions.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Out-of-range index (targets, expert ids, row gathers).
class IndexError : public Error {
public:
    using Error::Error;
};

// Misuse of the tape: non-scalar root, double backward.
class AutodiffError : public Error {
public:
    using Error::Error;
};

// Bad configuration file, unknown key, invalid override.
class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace moelab
