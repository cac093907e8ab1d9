#pragma once

#include <cstddef>
#include <cstdint>
#include <iterator>
#include <stdexcept>
#include <vector>

#include "mcbs/rng.hpp"

namespace mcbs {

/// Gaussian cloud along the mirror normal. z is measured from the (virtual) mirror plane.
struct CloudSpec {
  double sigma_z = 0.9e-3;            // 1/sqrt(e) radius [m]
  double mirror_distance_h = 8.0e-3;  // cloud centre to mirror [m], may be negative
  std::size_t atom_count = 1'000'000;

  void validate() const {
    if (!(sigma_z > 0.0)) throw std::invalid_argument("cloud: sigma_z must be > 0");
    if (atom_count < 1) throw std::invalid_argument("cloud: atom_count must be >= 1");
  }
};

struct Realization {
  std::vector<double> z_positions;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;

  std::size_t size() const { return z_positions.size(); }
};

namespace streams {
inline constexpr std::uint32_t longitudinal = 0;
inline constexpr std::uint32_t transverse = 1;
}  // namespace streams

/// z_j ~ Normal(h, sigma_z), a pure function of (cloud, seed, index).
inline Realization sample_realization(const CloudSpec& cloud, std::uint64_t seed, std::uint64_t index) {
  cloud.validate();
  const rng::CounterStream gen(seed, streams::longitudinal, index);
  Realization r{std::vector<double>(cloud.atom_count), seed, index};
  const std::size_t n = cloud.atom_count;
  for (std::size_t j = 0; j < n; j += 2) {
    const auto [g0, g1] = gen.normal_pair(j / 2);
    r.z_positions[j] = cloud.mirror_distance_h + cloud.sigma_z * g0;
    if (j + 1 < n) r.z_positions[j + 1] = cloud.mirror_distance_h + cloud.sigma_z * g1;
  }
  return r;
}

/// Lazily generated realizations 0..count-1; element i equals sample_realization(cloud, seed, i).
class RealizationStream {
 public:
  RealizationStream(CloudSpec cloud, std::uint64_t seed, std::size_t count)
      : cloud_(cloud), seed_(seed), count_(count) {
    cloud_.validate();
    if (count < 1) throw std::invalid_argument("realization stream: count must be >= 1");
  }

  std::size_t size() const { return count_; }
  Realization operator[](std::size_t i) const { return sample_realization(cloud_, seed_, i); }
  const CloudSpec& cloud() const { return cloud_; }
  std::uint64_t seed() const { return seed_; }

  class iterator {
   public:
    using value_type = Realization;
    using difference_type = std::ptrdiff_t;
    using iterator_category = std::input_iterator_tag;

    iterator() = default;
    iterator(const RealizationStream* s, std::size_t i) : s_(s), i_(i) {}
    Realization operator*() const { return (*s_)[i_]; }
    iterator& operator++() {
      ++i_;
      return *this;
    }
    iterator operator++(int) {
      auto t = *this;
      ++i_;
      return t;
    }
    bool operator==(const iterator& o) const { return i_ == o.i_; }

   private:
    const RealizationStream* s_ = nullptr;
    std::size_t i_ = 0;
  };

  iterator begin() const { return {this, 0}; }
  iterator end() const { return {this, count_}; }

 private:
  CloudSpec cloud_;
  std::uint64_t seed_;
  std::size_t count_;
};

inline RealizationStream realization_stream(const CloudSpec& cloud, std::uint64_t seed, std::size_t count) {
  return {cloud, seed, count};
}

}  // namespace mcbs
