#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cbx {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand dimensions do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside the domain of a function (log of a non-positive value, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Softmax over a row with every entry masked out.
class InvalidCandidateSetError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward on a non-scalar root.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or hyperparameter.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Logged propensity of the chosen action is below the accepted floor.
class PropensityFloorError : public Error {
 public:
  using Error::Error;
};

// Malformed input text. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Structurally valid input that breaks a semantic rule.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss or runaway parameters.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long iteration)
      : Error(what + " at iteration " + std::to_string(iteration)), iteration_(iteration) {}
  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Report assembly failed (e.g. baseline missing).
class ReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace cbx
