#pragma once

#include <stdexcept>
#include <string>

namespace pvfl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Operation called in the wrong lifecycle state (e.g. backward twice).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment, synthesis or split configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (missing column, unparsable cell).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Missing half-hour readings or missing days in a meter series.
class GapError : public Error {
 public:
  using Error::Error;
};

/// Physically invalid values (negative irradiance, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Prosumer-to-center mapping is incomplete or duplicated.
class AssignmentError : public Error {
 public:
  using Error::Error;
};

/// A normalisation or metric needs spread that the data does not have.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Uploaded parameter sets cannot be combined.
class AggregationError : public Error {
 public:
  using Error::Error;
};

}  // namespace pvfl
