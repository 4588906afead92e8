#pragma once

#include <stdexcept>
#include <string>

namespace smmh {

// Base of every exception thrown by the library. Each subclass maps to a
// distinct CLI exit code (see tools/smmh.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class StationarityError : public ParameterError {
 public:
  using ParameterError::ParameterError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Sampler guards.
class RunawayPathError : public Error {
 public:
  using Error::Error;
};

class ExplosionError : public Error {
 public:
  using Error::Error;
};

class EmptyEpisodeError : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// Dataset cannot support the requested fit or metric (e.g. a single label).
class DegenerateDatasetError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatchError : public Error {
 public:
  using Error::Error;
};

// Raised when an invariant that must hold by construction is violated, such
// as an EM iteration lowering the observed-data log-likelihood.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace smmh
