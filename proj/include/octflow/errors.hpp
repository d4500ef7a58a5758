#pragma once

#include <stdexcept>
#include <string>

namespace octflow {

// Base for all library errors; the CLI maps each subclass to an exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Precondition violations on shapes, dimensions and values.
struct DomainError : Error {
  using Error::Error;
};
// Malformed binary or text payloads.
struct FormatError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
// Shape-rule violations inside a computation graph; message names the node.
struct GraphError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
// Non-finite losses or gradients during optimization.
struct TrainingError : Error {
  using Error::Error;
};
// Metric or loss evaluated over an empty set of pixels.
struct EvaluationError : Error {
  using Error::Error;
};

}  // namespace octflow
