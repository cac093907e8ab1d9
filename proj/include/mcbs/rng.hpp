#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>

#include "mcbs/physics.hpp"

namespace mcbs::rng {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
/// Stateless: the output is a pure function of (counter, key).
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static constexpr Counter round(const Counter& c, const Key& k) {
    const std::uint64_t p0 = std::uint64_t{kMul0} * c[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }

  static constexpr Counter generate(Counter c, Key k) {
    c = round(c, k);
    for (int r = 1; r < 10; ++r) {
      k[0] += kWeyl0;
      k[1] += kWeyl1;
      c = round(c, k);
    }
    return c;
  }
};

inline constexpr Philox4x32::Key key_from_seed(std::uint64_t seed) {
  return {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
}

/// Uniform in (0, 1) on the 2^52 midpoints k + 1/2; never returns 0 or 1.
inline double to_unit_open(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = ((std::uint64_t{hi} << 32) | lo) >> 12;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-52;
}

/// Random stream addressed by (seed, stream, realization, element). Streams keep independent
/// draws (e.g. longitudinal vs transverse positions) apart for the same realization.
class CounterStream {
 public:
  CounterStream(std::uint64_t seed, std::uint32_t stream, std::uint64_t realization)
      : key_(key_from_seed(seed)), stream_(stream), realization_(realization) {}

  Philox4x32::Counter block(std::uint64_t element) const {
    // 32-bit element index | 16-bit stream | 48-bit realization index.
    const Philox4x32::Counter c{static_cast<std::uint32_t>(element),
                                static_cast<std::uint32_t>(element >> 32) ^ (stream_ << 16),
                                static_cast<std::uint32_t>(realization_),
                                static_cast<std::uint32_t>(realization_ >> 32)};
    return Philox4x32::generate(c, key_);
  }

  /// Two independent standard normals (Box-Muller) from block `element`.
  std::pair<double, double> normal_pair(std::uint64_t element) const {
    const auto b = block(element);
    const double u1 = to_unit_open(b[0], b[1]);
    const double u2 = to_unit_open(b[2], b[3]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return {r * std::cos(two_pi * u2), r * std::sin(two_pi * u2)};
  }

  std::pair<double, double> uniform_pair(std::uint64_t element) const {
    const auto b = block(element);
    return {to_unit_open(b[0], b[1]), to_unit_open(b[2], b[3])};
  }

 private:
  Philox4x32::Key key_;
  std::uint32_t stream_;
  std::uint64_t realization_;
};

}  // namespace mcbs::rng
