#pragma once

#include <stdexcept>
#include <string>

namespace sbridge {

/// Argument outside the mathematical domain of an operation (t outside [0,T], eps <= 0, NaN input).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed configuration or inconsistent shapes.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// q_i = 0 while p_i > 0 in a KL divergence.
class AbsoluteContinuityError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// A cached trajectory batch was used after its refresh period elapsed.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite state or loss. `step` is the integrator step or optimizer iteration.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file; `line` is 1-based.
class ParseError : public IoError {
 public:
  ParseError(const std::string& what, long line)
      : IoError("line " + std::to_string(line) + ": " + what), line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

}  // namespace sbridge
