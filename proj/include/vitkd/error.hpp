#pragma once

#include <stdexcept>
#include <string>

namespace vitkd {

// Root of every error thrown by the library. The CLI maps subclasses onto
// exit codes (config 2, I/O 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Violated call contract (non-scalar loss, empty batch, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents: bad magic, CRC mismatch, truncation, counts.
class FormatError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Cross-attention with masked queries but no visible key.
class DegenerateAttentionError : public Error {
 public:
  using Error::Error;
};

}  // namespace vitkd
