#pragma once

// Shared plumbing: the axis convention, error types, seeded random draws and
// bit-faithful encoding of doubles used by the serialization code.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace gausscount {

// ============================================================================
// Axis convention
// ============================================================================
//
// Axis 0 runs over rows (vertical), axis 1 over columns (horizontal).
// Annotation points are stored as (x, y) = (axis 1, axis 0) to match the
// column order of the annotations CSV; everything else works in (d0, d1).

struct Vec2 {
  double d0 = 0.0;  // offset along axis 0 (rows)
  double d1 = 0.0;  // offset along axis 1 (columns)
};

// ============================================================================
// Errors
// ============================================================================

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched grid/map dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (counts, ranges, covariances).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A reference-path guard refused a problem size.
class OracleSizeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// ============================================================================
// Random draws
// ============================================================================
//
// All stochastic code takes an explicit 64-bit seed. Draws go through the
// helpers below instead of <random> distributions, whose output is
// implementation defined; this keeps artifacts byte-identical across
// standard libraries.

using Rng = std::mt19937_64;

// Uniform in [0, 1) with 53 random bits.
inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_in(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(rng);
}

// Standard normal via Box-Muller. One value per call, no cached spare, so a
// call sequence depends only on the rng state.
double normal_draw(Rng& rng);

// Derives a stream seed from a base seed (splitmix64 finalizer). Used to give
// independent deterministic streams to layers, replicas and trials.
std::uint64_t split_seed(std::uint64_t base, std::uint64_t stream);

// ============================================================================
// Bit-faithful doubles
// ============================================================================

// 16 lowercase hex digits of the IEEE-754 bit pattern.
std::string double_to_hex(double value);
double double_from_hex(const std::string& hex);

// Value formatted with 9 significant digits, the CSV convention.
std::string format_sig9(double value);

}  // namespace gausscount
