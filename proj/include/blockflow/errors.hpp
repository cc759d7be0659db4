#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace blockflow {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse: non-scalar loss, missing time input, untrained model...
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Bad input data or configuration.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Preprocessing stage called out of order.
class PipelineOrderError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite loss, activations or trajectory.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t where) : std::runtime_error(what), where_(where) {}
  // Epoch or step index at which the failure was detected.
  std::size_t where() const { return where_; }

 private:
  std::size_t where_;
};

}  // namespace blockflow
