#pragma once

#include <stdexcept>
#include <string>

namespace dscm {

// Error categories shared by every module. The CLI maps them onto exit codes:
// ArgumentError -> 2, StateError/IoError/DomainError/ConfigError -> 3.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value lies outside the domain where a mechanism or measurement is defined.
class DomainError : public Error {
 public:
  DomainError(std::string node, const std::string& what)
      : Error(node.empty() ? what : node + ": " + what), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Operation requires state the object does not have (untrained model, missing abduction).
class StateError : public Error {
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

}  // namespace dscm
