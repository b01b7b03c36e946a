#pragma once

#include <stdexcept>
#include <string>

namespace rftrace {

// Base for every error raised by the library. kind() is the stable tag the
// CLI puts into its JSON error documents.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape_error"; }
};

class GraphError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "graph_error"; }
};

class TraceError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "trace_error"; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format_error"; }
};

class ValueError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "value_error"; }
};

}  // namespace rftrace
