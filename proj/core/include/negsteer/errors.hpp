#pragma once

#include <stdexcept>
#include <string>

namespace negsteer {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed tokenizer assets (vocabulary or merges), with the offending line.
class AssetError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or incomplete configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor container could not be loaded or failed validation.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Precondition violated by caller-supplied input.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A direction artifact was produced for a different encoder.
class ProvenanceError : public Error {
 public:
  using Error::Error;
};

/// Probe training could not run (e.g. only one class present).
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Failure talking to a chat-completions endpoint.
class ApiError : public Error {
 public:
  ApiError(const std::string& what, int status, std::string request_id)
      : Error(what), status_(status), request_id_(std::move(request_id)) {}

  int status() const noexcept { return status_; }
  const std::string& request_id() const noexcept { return request_id_; }

 private:
  int status_;
  std::string request_id_;
};

/// Connection-level or retryable server failure (5xx, 429, timeouts).
class TransportError : public ApiError {
 public:
  using ApiError::ApiError;
};

/// Question generation failed to yield a valid pair after all attempts.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace negsteer
