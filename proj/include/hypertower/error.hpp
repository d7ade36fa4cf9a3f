#pragma once

#include <stdexcept>
#include <string>

namespace hypertower {

// Base class for every failure raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// An input violated a documented precondition.
class PreconditionError : public Error {
public:
    using Error::Error;
};

// An iterative procedure did not reach its tolerance.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

// A verified estimate failed; carries a human-readable witness.
class VerificationError : public Error {
public:
    using Error::Error;
};

}  // namespace hypertower
