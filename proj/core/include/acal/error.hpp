#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace acal {

// Invalid tensor construction values or operand shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad values fed to an operation (non-finite input, log of non-positive, ...).
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Out-of-range class index or element index.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// API misuse: non-scalar backward, checkpoint role mismatch, oracle misuse.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid run configuration. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or divergence during training. Maps to CLI exit code 2.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary input. Carries the byte offset of the first bad byte.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Filesystem failure (unwritable path, missing file).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace acal
