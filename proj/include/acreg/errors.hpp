#pragma once

#include <exception>
#include <stdexcept>
#include <string>

namespace acreg {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Bad argument value (non-finite coordinate, even window, negative steps, bad config).
class InvalidInputError : public Error {
public:
  using Error::Error;
};

/// Grids disagree, or a grid is too small for the requested operation.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// A metric has no defined value for the inputs (e.g. Dice of an absent label).
class UndefinedMetricError : public Error {
public:
  using Error::Error;
};

class DivergenceError : public Error {
public:
  DivergenceError(const std::string& what, int iteration)
      : Error(what), iteration_(iteration) {}

  int iteration() const noexcept { return iteration_; }

private:
  int iteration_;
};

/// File system failures and malformed volume files.
class IoError : public Error {
public:
  using Error::Error;
};

enum class ExitCode : int {
  ok = 0,
  invalid_input = 2,
  divergence = 3,
  io = 4,
};

inline ExitCode exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DivergenceError*>(&e)) return ExitCode::divergence;
  if (dynamic_cast<const IoError*>(&e)) return ExitCode::io;
  return ExitCode::invalid_input;
}

} // namespace acreg
