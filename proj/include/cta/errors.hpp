#pragma once

#include <stdexcept>
#include <string>

namespace cta {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not fit the requested operation.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid model/train/data/run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// API misuse, e.g. backward() called twice on one graph.
struct ContractError : Error {
  using Error::Error;
};

// Malformed binary input (CIFAR records, checkpoints, tensor blobs).
struct FormatError : Error {
  using Error::Error;
};

// Missing dataset files.
struct DataError : Error {
  using Error::Error;
};

// Out-of-range user input such as labels.
struct InputError : Error {
  using Error::Error;
};

// NaN/Inf where a finite value is required.
struct NumericalError : Error {
  using Error::Error;
};

}  // namespace cta
