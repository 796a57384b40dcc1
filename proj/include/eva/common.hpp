#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eva {

// Error taxonomy. Each class maps to one CLI exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : Error {  // exit 2: bad config, bad arguments
  using Error::Error;
};
struct DataError : Error {  // exit 3: bad or missing data
  using Error::Error;
};
struct NumericalError : Error {  // exit 4: non-finite values, solver failure
  using Error::Error;
};
struct IdentifierError : Error {  // exit 5: remote identifier failures
  using Error::Error;
};

enum class CheckpointFault { bad_magic, version_mismatch, truncated, header_mismatch };

struct CheckpointError : DataError {
  CheckpointFault fault;
  CheckpointError(CheckpointFault f, const std::string& msg) : DataError(msg), fault(f) {}
};

inline uint64_t fnv1a(std::span<const uint8_t> bytes, uint64_t h = 0xcbf29ce484222325ull) {
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s) {
  return fnv1a(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
}

// All randomness flows from one master seed through named substreams, so
// components (fixture, attack, selection, ...) can be re-seeded independently.
class Rng {
 public:
  Rng(uint64_t master_seed, const std::string& stream) {
    std::seed_seq seq{master_seed, fnv1a(stream)};
    engine_.seed(seq);
  }

  uint64_t next_u64() { return engine_(); }

  // Hand-rolled draws: the standard distributions are implementation-defined,
  // these keep streams stable across toolchains.
  double uniform() {  // [0, 1)
    return (engine_() >> 11) * 0x1.0p-53;
  }

  int uniform_int(int n) {  // [0, n)
    return static_cast<int>(engine_() % static_cast<uint64_t>(n));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(two_pi * u2);
    have_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Fixed-order pairwise summation: bit-stable regardless of how callers
// gathered the terms, and more accurate than a running sum.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() == 0) return 0.0;
  if (xs.size() == 1) return xs[0];
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  size_t half = xs.size() / 2;
  return pairwise_sum(xs.subspan(0, half)) + pairwise_sum(xs.subspan(half));
}

// Write-temp-then-rename so partially written outputs are never observable.
void atomic_write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace eva
