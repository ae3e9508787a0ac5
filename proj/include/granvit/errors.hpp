#pragma once

#include <stdexcept>
#include <string>

namespace granvit {

// Contract violations raised by the numeric core and the pipeline ops.
// Filtering outcomes (Accept/Reject) are values, not exceptions.

struct ShapeMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NotScalarError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DisconnectedLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateBoxError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LengthMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NotDivisibleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TooLongError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyMaskError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyBatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptySetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace granvit
