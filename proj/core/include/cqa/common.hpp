#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cqa {

inline constexpr std::string_view kVersion = "0.1.0";

// Error hierarchy. The CLI maps these onto exit codes: ConfigError -> 2,
// DataError (and subclasses) -> 3, NumericError -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct ParseError : DataError {
  using DataError::DataError;
};

struct ValidationError : DataError {
  using DataError::DataError;
};

struct SamplingExhausted : DataError {
  using DataError::DataError;
};

struct NumericError : Error {
  using Error::Error;
};

// Caller-side contract breach (e.g. a Union node reaching the embedding
// pipeline). Distinct from data errors: these indicate bugs, not bad input.
struct ContractViolation : Error {
  using Error::Error;
};

// Deterministic, platform-independent PRNG (splitmix64). Frozen test values
// and byte-identical reruns depend on this exact sequence, so the standard
// <random> distributions (which are implementation-defined) are not used.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Multiply-shift; bias is < n * 2^-64.
  uint32_t below(uint32_t n) {
    return static_cast<uint32_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

 private:
  uint64_t state_;
};

// Seed combinators for deriving independent substreams. Training code keys
// every stream by (run seed, step, purpose) so that runs are resumable and
// repeatable without carrying RNG state around.
inline uint64_t mix64(uint64_t a, uint64_t b) {
  uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t tag64(std::string_view label) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline Rng substream(uint64_t seed, std::string_view purpose, uint64_t index = 0) {
  return Rng(mix64(mix64(seed, tag64(purpose)), index));
}

}  // namespace cqa
