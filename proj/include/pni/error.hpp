#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pni {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Class label or element index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, training or experiment configuration. `field()` names the
/// offending key when one is known.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message, std::string field = {})
      : Error(field.empty() ? message : field + ": " + message), message_(message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }
  /// The message without the field prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::string field_;
};

/// Malformed input file (IDX datasets).
class FormatError : public Error {
 public:
  FormatError(const std::string& message, std::size_t offset)
      : Error(message + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Corrupt or truncated checkpoint.
class IntegrityError : public Error {
 public:
  IntegrityError(const std::string& message, std::size_t offset)
      : Error(message + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

/// Attack could not proceed, e.g. a non-finite gradient or score.
class AttackError : public Error {
 public:
  AttackError(const std::string& message, std::size_t sample)
      : Error(message + " (sample " + std::to_string(sample) + ")"), sample_(sample) {}
  std::size_t sample() const noexcept { return sample_; }

 private:
  std::size_t sample_;
};

/// Training diverged.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace pni
