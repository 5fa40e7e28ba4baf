#pragma once

#include <stdexcept>
#include <string>

namespace mega {

// Bad user input: files, schemas, unknown columns, invalid configuration.
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

// The data were read fine but the estimator cannot produce an answer
// (singular matrices, non-convergence, degenerate normalizations).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mega
