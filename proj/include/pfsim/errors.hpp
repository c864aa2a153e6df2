#pragma once

#include <stdexcept>
#include <string>

namespace pfsim {

// Configuration, schema or file problems. The CLI maps these to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Factorization failures, optimizer or sampler breakdown, degenerate data.
// The CLI maps these to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateDataError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace pfsim
