// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace icenet {

// Operand dimensions or tensor shapes disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value is outside its admissible range (eta, radius, gamma, ...).
class RangeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed external data: checkpoints, stroke JSON, observation files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Image payload could not be decoded.
class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Image decodes but exceeds the configured size cap.
class ImageTooLarge : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A gradient or loss turned NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace icenet
