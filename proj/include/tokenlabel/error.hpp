#pragma once

#include <stdexcept>
#include <string>

namespace tokenlabel {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: dataset markup, run specs, agreement specs.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Evaluator lacks a requested capability (gradients, priors).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

/// Failure talking to an external evaluator, including bad replies.
class TransportError : public Error {
 public:
  using Error::Error;
};

}  // namespace tokenlabel
