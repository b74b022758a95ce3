#pragma once

#include <stdexcept>
#include <string>

namespace clewi {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A trainable parameter was not reached from the loss during backward.
class MissingGradientError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input: checkpoint or IDX file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Dataset construction or loading problems (counts, paths, class splits).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// An operation needed buffer samples but the buffer holds none.
class EmptyBufferError : public Error {
 public:
  using Error::Error;
};

}  // namespace clewi
