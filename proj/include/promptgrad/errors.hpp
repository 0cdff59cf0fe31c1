#pragma once

#include <stdexcept>
#include <string>

namespace promptgrad {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GraphError : Error {
  using Error::Error;
};

struct TemplateError : Error {
  using Error::Error;
};

struct BackendError : Error {
  using Error::Error;
};

/// A request reached the scripted backend that no script entry matches.
struct UnscriptedRequestError : BackendError {
  using BackendError::BackendError;
};

struct ProposalParseError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace promptgrad
