#pragma once

#include <stdexcept>
#include <string>

namespace gpmm {

/// Raised when a caller breaks an operation's preconditions (shape mismatch,
/// out-of-range argument, invalid configuration).
class ContractViolation : public std::invalid_argument {
public:
    explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when a factorization still fails after the full jitter schedule.
class NumericalDegeneracy : public std::runtime_error {
public:
    explicit NumericalDegeneracy(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when a checkpoint or config file cannot be parsed.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what)
{
    if (!cond)
        throw ContractViolation(what);
}

} // namespace gpmm
