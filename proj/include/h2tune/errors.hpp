#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace h2tune {

// Base for every error raised by the library. CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid ranks, ratios, layer chains, or malformed configuration documents.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Stack depth / rank mismatches between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite input, loss or gradient. `term()` names the offending quantity.
class NumericError : public Error {
 public:
  NumericError(std::string term, const std::string& what)
      : Error(what), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

// Malformed serialized stack. `offset()` is the byte position where decoding failed.
class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& what)
      : Error(what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Upload from a client does not match the federation's (L_g, r_g).
class ProtocolError : public Error {
 public:
  ProtocolError(int client, const std::string& what) : Error(what), client_(client) {}
  int client() const { return client_; }

 private:
  int client_;
};

// Proximal inner solve ended above its starting objective.
class SolverError : public Error {
 public:
  using Error::Error;
};

// A client's round failed numerically; carries where it happened.
class DivergenceError : public Error {
 public:
  DivergenceError(int round, int client, std::string term, const std::string& what)
      : Error(what), round_(round), client_(client), term_(std::move(term)) {}
  int round() const { return round_; }
  int client() const { return client_; }
  const std::string& term() const { return term_; }

 private:
  int round_;
  int client_;
  std::string term_;
};

// Post-run check of a protocol invariant failed.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace h2tune
