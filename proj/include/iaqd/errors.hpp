#pragma once

#include <stdexcept>
#include <string>

namespace iaqd {

/// Raised when a domain value fails construction-time validation.
class InvariantViolation : public std::invalid_argument {
 public:
  InvariantViolation(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InvalidCategory : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class InvalidAssignment : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SpecMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FrozenModelError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class CategoryOverlap : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PlacementFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace iaqd
