#pragma once

#include <stdexcept>
#include <string>

namespace fedcd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent dimensions, invalid hyperparameters or malformed config.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition (empty batch, eps <= 0, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Messages exchanged between clients and server do not fit together.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Local training diverged; carries the round and client that failed.
class ClientAbort : public Error {
 public:
  ClientAbort(int client_id, std::size_t round, const std::string& what)
      : Error("client " + std::to_string(client_id) + " aborted in round " +
              std::to_string(round) + ": " + what),
        client_id_(client_id),
        round_(round) {}

  int client_id() const { return client_id_; }
  std::size_t round() const { return round_; }

 private:
  int client_id_;
  std::size_t round_;
};

}  // namespace fedcd
