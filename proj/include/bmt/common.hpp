#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

// The library is compiled twice: once with single-precision storage (the
// default used for training and inference) and once with double-precision
// storage for finite-difference gradient checks. The inline namespace keeps
// the two builds link-compatible inside one executable.
#ifdef BMT_REAL_DOUBLE
#define BMT_PRECISION_NS f64
#else
#define BMT_PRECISION_NS f32
#endif

namespace bmt {

inline namespace BMT_PRECISION_NS {
#ifdef BMT_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif
}  // namespace BMT_PRECISION_NS

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or an invalid axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or malformed input file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Reserved token ids shared by the data generator, model and decoders.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstContentToken = 3;

}  // namespace bmt
