#pragma once

#include <stdexcept>
#include <string>

namespace qcap {

// Base of everything thrown by the library. The CLI maps subclasses onto
// exit codes (usage 1, data 2, numerical 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyCaption : public Error {
 public:
  using Error::Error;
};

class DegenerateRefSet : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class UnknownToken : public Error {
 public:
  using Error::Error;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& path, std::size_t byte_offset, const std::string& what)
      : Error(path + ":" + std::to_string(byte_offset) + ": " + what),
        path_(path),
        byte_offset_(byte_offset) {}

  const std::string& path() const { return path_; }
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::string path_;
  std::size_t byte_offset_;
};

// NaN/Inf in a loss or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace qcap
