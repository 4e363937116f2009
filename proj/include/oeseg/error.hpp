#pragma once

#include <stdexcept>
#include <string>

namespace oeseg {

// Base class for all library errors. CLI maps these to exit code 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/operator shape violations.
struct DimensionError : Error {
  using Error::Error;
};

// API preconditions other than shapes (bad ratios, inconsistent plans, ...).
struct ContractError : Error {
  using Error::Error;
};

// Selection budget outside the legal range for the chosen strategy.
struct BudgetError : Error {
  using Error::Error;
};

// Problems with on-disk datasets (missing files, orphan masks, ...).
struct DataError : Error {
  using Error::Error;
};

// Malformed binary/JSON artifacts (bad magic, truncation, version).
struct FormatError : Error {
  using Error::Error;
};

// Invalid run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Refusal to run an intractable exhaustive computation.
struct GuardError : Error {
  using Error::Error;
};

}  // namespace oeseg
