#pragma once

#include <stdexcept>
#include <string>

namespace fusiondiff {

// Bad world/model/train configuration or mismatched artifacts.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed caller input (out-of-range timestep, OOV token, zero query...).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operations called in the wrong order or with missing artifacts.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values in activations, losses or gradients.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fusiondiff
