#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace heightbins {

/// Operand shapes or sizes violate an operation's preconditions.
struct ContractViolation : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of a function (log of a
/// non-positive value, ierf(|p| >= 1), ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// Invalid or inconsistent configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or unreadable data files.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Parse failure at a known byte offset of an input file.
struct ParseError : DataError {
  ParseError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

/// Non-finite value encountered during optimization.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace heightbins
