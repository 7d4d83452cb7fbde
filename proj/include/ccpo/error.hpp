#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ccpo {

/// Caller violated a documented precondition (wrong state, bad dimension, illegal action).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A record or config failed an invariant. `field()` names the offending field.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Malformed input text. `line()` is 1-based.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Non-finite value or solver breakdown. `index()` is the iteration (or episode) where it surfaced.
class NumericError : public std::runtime_error {
 public:
  NumericError(long index, const std::string& what)
      : std::runtime_error(what + " (at " + std::to_string(index) + ")"), index_(index) {}
  long index() const noexcept { return index_; }

 private:
  long index_;
};

}  // namespace ccpo
