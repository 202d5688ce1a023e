// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sketchguide {

// Base of every error raised by the library. Subclasses mirror the error
// kinds callers are expected to distinguish.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class parameter_error : public error {
public:
    using error::error;
};

class shape_error : public error {
public:
    using error::error;
};

class ordering_error : public error {
public:
    using error::error;
};

class domain_error : public error {
public:
    using error::error;
};

class lookup_error : public error {
public:
    using error::error;
};

class numerical_error : public error {
public:
    using error::error;
};

class io_error : public error {
public:
    using error::error;
};

} // namespace sketchguide
