#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace proutt {

/// Base exception for every failure surfaced by the toolkit. `kind()` is a
/// stable machine-readable tag (e.g. "cassette-miss", "unbalanced-brace").
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Input data (files, records, model output) did not match its format.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Transport, cassette and endpoint failures from the LLM gateway.
class GatewayError : public Error {
 public:
  using Error::Error;
};

}  // namespace proutt
