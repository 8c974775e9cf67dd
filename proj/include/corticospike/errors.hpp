#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace corticospike {

/// Base of every error the library raises. The CLI maps TrainingError to
/// exit code 3 and everything else to exit code 2.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ParameterError : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class DataError : public Error {
public:
  using Error::Error;
};

class DegenerateInputError : public Error {
public:
  using Error::Error;
};

class LookupError : public Error {
public:
  explicit LookupError(std::string key)
      : Error("unknown name: " + key), key_(std::move(key)) {}
  const std::string &key() const noexcept { return key_; }

private:
  std::string key_;
};

/// Malformed file; field() names the offending header field ("magic",
/// "version", "dtype", "ndim", "dims", "payload", ...).
class FormatError : public Error {
public:
  FormatError(std::string field, const std::string &detail)
      : Error("format error in field '" + field + "': " + detail),
        field_(std::move(field)) {}
  const std::string &field() const noexcept { return field_; }

private:
  std::string field_;
};

/// Invalid run configuration; field() is "section.key".
class ConfigError : public Error {
public:
  ConfigError(std::string field, const std::string &detail)
      : Error("config field '" + field + "': " + detail), field_(std::move(field)) {}
  const std::string &field() const noexcept { return field_; }

private:
  std::string field_;
};

class TrainingError : public Error {
public:
  using Error::Error;
};

} // namespace corticospike
