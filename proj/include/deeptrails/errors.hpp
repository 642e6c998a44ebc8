#pragma once

#include <stdexcept>
#include <string>

namespace deeptrails {

// Invalid configuration values (graph sizes, hyperparameters, model shapes).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An argument outside the domain of an operation (bad state id, unknown level).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Malformed serialized input.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse, e.g. evaluating an unfrozen model.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// Training data that a model cannot consume.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A NaN or infinity appeared in a tensor.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace deeptrails
