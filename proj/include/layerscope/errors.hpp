#pragma once

#include <stdexcept>
#include <string>

namespace layerscope {

// Base for every error the toolkit raises. The CLI maps ConfigError and
// LoadError to exit code 2; everything else raised inside a sweep run is
// recorded on that run.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Shape or length mismatch inside the numeric core.
class StructuralError : public Error {
  public:
    using Error::Error;
};

// Bad caller input: token out of range, sequence too long, empty continuation.
class InputError : public Error {
  public:
    using Error::Error;
};

class LoadError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class PlanError : public Error {
  public:
    using Error::Error;
};

class TaskError : public Error {
  public:
    using Error::Error;
};

class DecodeError : public Error {
  public:
    using Error::Error;
};

class ComparisonError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

}  // namespace layerscope
