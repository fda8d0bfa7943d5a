#pragma once

#include <stdexcept>
#include <string>

namespace packptq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: unknown names, malformed configs, schema violations,
/// missing files. The CLI maps these to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A document failed validation; `path` is a JSON-pointer to the offending node.
class SchemaError : public ConfigError {
 public:
  SchemaError(std::string path, const std::string& what)
      : ConfigError(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, infeasible numerics. Exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace packptq
