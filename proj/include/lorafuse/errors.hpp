#pragma once

#include <stdexcept>
#include <string>

namespace lorafuse {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or dimension mismatch between operands.
struct DimError : Error {
    explicit DimError(const std::string& msg) : Error(msg) {}
};

// Violated API contract (bad argument range, misuse of a trace, ...).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Numerically degenerate input (zero norm vector, ...).
struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& msg) : Error(msg) {}
};

// KL divergence undefined: q has zero mass where p does not.
struct DivergenceUndefinedError : Error {
    explicit DivergenceUndefinedError(const std::string& msg) : Error(msg) {}
};

// Input failed a stated precondition (e.g. not a probability vector).
struct PreconditionError : Error {
    explicit PreconditionError(const std::string& msg) : Error(msg) {}
};

// Malformed file (weight file, trace CSV, config).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Gradient requested for a tensor that was never registered on the trace.
struct UnknownInputError : Error {
    explicit UnknownInputError(const std::string& msg) : Error(msg) {}
};

// Runtime numeric failure (NaN/Inf mid-computation, diverging loss).
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace lorafuse
