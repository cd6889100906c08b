#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lengthlab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or an intervention that leaves nothing to train on.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset or vocabulary record. `line()` is 1-based.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss, gradient or reward.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// A rollout intervention could not be applied to a batch.
class InterventionError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage was requested before the stage producing its inputs.
class DependencyError : public Error {
 public:
  DependencyError(std::string stage, const std::string& what)
      : Error(what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace lengthlab
