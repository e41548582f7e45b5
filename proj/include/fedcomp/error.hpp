#pragma once

#include <stdexcept>
#include <string>

namespace fedcomp {

// Invalid configuration, dimension mismatch, bad argument.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Not enough samples to satisfy a request.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed IDX or history file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The attack hit an input it cannot produce a result for (zero update,
// all-zero scalar factors). Reported as an anomaly, never as a result.
class DegenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fedcomp
