#pragma once

#include <stdexcept>
#include <string>

namespace hrfseg {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes disagree with a layer's shape rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller passed an argument outside the documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Operation requested in the wrong state (e.g. backward before a recorded forward).
class StateError : public Error {
 public:
  using Error::Error;
};

// On-disk data is malformed, truncated or of the wrong version.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Metric is undefined for the given input (e.g. AUROC with one class).
class MetricError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// The promptable segmenter could not answer.
class SegmenterError : public Error {
 public:
  using Error::Error;
};

}  // namespace hrfseg
