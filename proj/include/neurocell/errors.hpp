#pragma once

#include <stdexcept>
#include <string>

namespace neurocell {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or raster extents do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is out of its documented range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A serialized file is corrupt or does not match the target.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Synthetic scene generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// A required input file or directory does not exist.
class MissingInputError : public Error {
 public:
  using Error::Error;
};

}  // namespace neurocell
