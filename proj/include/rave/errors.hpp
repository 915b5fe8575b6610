#pragma once

#include <stdexcept>
#include <string>

namespace rave {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A direction could not be formed: zero vector, zero mean, identical corpora.
class DegenerateDirectionError : public Error {
 public:
  using Error::Error;
};

class UnknownModelError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public Error {
 public:
  using Error::Error;
};

/// The backend has no text tower (image-only encoder).
class NoTextTowerError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated, or wrong-version file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace rave
