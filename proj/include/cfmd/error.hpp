#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cfmd {

enum class ErrorKind {
  shape,     // operand extents disagree
  size,      // element count overflow
  contract,  // precondition violated by the caller
  numeric,   // non-finite values where finite ones are required
  format,    // malformed file contents
  io,        // file could not be opened / written
  config,    // bad configuration key or value
  training,  // divergence during optimization
  internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& w) : Error(ErrorKind::shape, "shape error: " + w) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& w)
      : Error(ErrorKind::contract, "contract error: " + w) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& w)
      : Error(ErrorKind::numeric, "numeric error: " + w) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& w, std::uint64_t offset)
      : Error(ErrorKind::format,
              "format error at byte " + std::to_string(offset) + ": " + w),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& w) : Error(ErrorKind::io, "io error: " + w) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& w)
      : Error(ErrorKind::config, "config error: " + w) {}
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& w, long step)
      : Error(ErrorKind::training, "training error: " + w), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace cfmd
