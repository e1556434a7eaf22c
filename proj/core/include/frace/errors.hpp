#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace frace {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed on-disk data (bad IDX magic, truncated blob, bad manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Two inputs that must agree do not (image/label counts, bundle members).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied value outside its documented domain.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A training loss became non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace frace
