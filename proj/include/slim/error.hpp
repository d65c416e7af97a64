#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace slim {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or missing user-supplied input (files, config, flags). CLI exit code 2.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed record in a line-delimited file.
class ParseError : public InputError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : InputError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A record names an entity that does not exist (e.g. interaction → unknown item).
class ReferenceError : public InputError {
 public:
  ReferenceError(const std::string& what, std::string missing_key)
      : InputError(what), missing_key_(std::move(missing_key)) {}

  const std::string& missing_key() const noexcept { return missing_key_; }

 private:
  std::string missing_key_;
};

/// Not enough elements to satisfy a sizing request.
class SizeError : public Error {
 public:
  using Error::Error;
};

/// Precondition on an argument violated.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Numerical domain violation (log of zero probability, zero vector, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Anything coming back from a remote endpoint. CLI exit code 3.
class RemoteError : public Error {
 public:
  using Error::Error;
};

/// Connection failures or retryable statuses that outlived the retry budget.
class TransportError : public RemoteError {
 public:
  TransportError(const std::string& what, int attempts) : RemoteError(what), attempts_(attempts) {}

  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

/// Non-retryable, non-success HTTP status.
class EndpointError : public RemoteError {
 public:
  EndpointError(int status, const std::string& body_excerpt)
      : RemoteError("endpoint returned status " + std::to_string(status) + ": " + body_excerpt),
        status_(status) {}

  int status() const noexcept { return status_; }

 private:
  int status_;
};

}  // namespace slim
