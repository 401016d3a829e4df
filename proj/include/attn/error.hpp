#pragma once

#include <stdexcept>
#include <string>

namespace attn {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input document (JSON, CSV, image).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid adapter/config file or option value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A keypoint track that cannot be completed.
class TrackError : public Error {
 public:
  using Error::Error;
};

/// Zero-length vector in an angle computation.
class DegenerateGeometryError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Internal state contradicts a documented invariant.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

/// Tensor or record dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace attn
