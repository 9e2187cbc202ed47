#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mfa {

/// Base of every error raised by the library. `exit_code()` is what the CLI
/// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Operand shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class IndexError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// A feature map is too small for the requested window dilation.
class GeometryError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Inputs are well-formed but violate a precondition (unbalanced shots,
/// missing layer, infeasible episode, bad config).
class ValidationError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// A value became NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Backward was requested without the intermediates of a forward pass.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary container. Carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }
  int exit_code() const noexcept override { return 3; }

 private:
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  IoError(const std::string& what, std::string path)
      : Error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }
  int exit_code() const noexcept override { return 4; }

 private:
  std::string path_;
};

}  // namespace mfa
