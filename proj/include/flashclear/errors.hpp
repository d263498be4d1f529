#pragma once

#include <stdexcept>
#include <string>

namespace flashclear {

// Error taxonomy. The CLI maps each family onto a distinct exit code.

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shape, range and contract violations on values passed into an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or incompatible files (corpus, checkpoint, config, logs).
class FormatError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kTruncated, kVersion, kMalformed, kIo };

  FormatError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Non-finite activations or losses.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A cache entry was consumed before it was produced or after invalidation.
class CacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace flashclear
