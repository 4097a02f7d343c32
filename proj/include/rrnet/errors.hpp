// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rrnet {

// Every failure the library reports derives from Error so callers (the CLI in
// particular) can map it to a non-zero exit status with one handler.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

// Checkpoint magic/version mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint payload truncated or inconsistent with its manifest.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

// CSV gaps, duplicates, malformed timestamps.
class IngestError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Metric undefined for the given data (constant series and the like).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace rrnet
