#pragma once

#include <stdexcept>
#include <string>

namespace cdet {

// Error categories surfaced by the library. The CLI maps each category to a
// distinct exit code.

/// Invalid configuration: bad keys, inconsistent sizes, unsupported options.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system or format problems while reading/writing artifacts.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A malformed record in a line-delimited file. `line` is 1-based.
class ParseError : public IoError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : IoError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A computation produced a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cdet
