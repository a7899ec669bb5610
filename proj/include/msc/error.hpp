// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace msc {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes; the message names both operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation precondition (non-scalar loss, empty input, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Out-of-range token id or position.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration; carries the offending field name.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config error [" + field + "]: " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Missing or unreadable file; carries the path.
class IoError : public Error {
 public:
  IoError(std::string path, const std::string& what)
      : Error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Malformed serialized data.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace msc
