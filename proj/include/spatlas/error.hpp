#pragma once

#include <stdexcept>
#include <string>

namespace spatlas {

/// Base of every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Grids that must agree in size do not.
struct DimensionMismatch : Error {
  using Error::Error;
};

/// An argument is outside the domain an operation is defined on.
struct DomainError : Error {
  using Error::Error;
};

/// Malformed, unsupported or truncated files; unresolvable manifests.
struct IoError : Error {
  using Error::Error;
};

/// A loss term or gradient became non-finite.
struct DivergenceError : Error {
  DivergenceError(std::string term, int iteration = -1)
      : Error(iteration >= 0 ? "non-finite " + term + " at iteration " + std::to_string(iteration)
                             : "non-finite " + term),
        term(std::move(term)),
        iteration(iteration) {}

  std::string term;
  int iteration;
};

}  // namespace spatlas
