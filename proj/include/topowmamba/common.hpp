#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace twm {

using Shape = std::vector<std::int64_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Names the network layer currently executing so numeric errors can report
// where they happened. Scopes nest; thread-local.
class OpScope {
 public:
  explicit OpScope(std::string name);
  ~OpScope();
  OpScope(const OpScope&) = delete;
  OpScope& operator=(const OpScope&) = delete;

  static std::string current();
};

// Deterministic RNG. mt19937_64 output is fully specified by the standard;
// all distributions are hand-rolled on top of it so streams are identical
// across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::int64_t uniform_int(std::int64_t n);

  // Box-Muller, one draw per call.
  double normal();

  // Zero-mean normal with stddev sigma, rejection-sampled to |z| <= 2 sigma.
  double trunc_normal(double sigma);

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::int64_t>(last - first);
    for (std::int64_t i = n - 1; i > 0; --i) {
      const auto j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

  // Derives an independent stream seed from (seed, stream id).
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 gen_;
};

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);

}  // namespace twm
