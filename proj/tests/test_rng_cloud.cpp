#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mcbs/cloud.hpp"
#include "mcbs/parallel.hpp"
#include "mcbs/rng.hpp"
#include "mcbs/summation.hpp"

using namespace mcbs;
using rng::Philox4x32;

// Known-answer vectors of the Random123 reference implementation.
TEST(Philox, KnownAnswers) {
  EXPECT_EQ(Philox4x32::generate({0, 0, 0, 0}, {0, 0}),
            (Philox4x32::Counter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(Philox4x32::generate({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}),
            (Philox4x32::Counter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
  EXPECT_EQ(Philox4x32::generate({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}),
            (Philox4x32::Counter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(Philox, UnitIntervalIsOpen) {
  EXPECT_GT(rng::to_unit_open(0, 0), 0.0);
  EXPECT_LT(rng::to_unit_open(0xffffffff, 0xffffffff), 1.0);
}

TEST(CounterStream, StreamsAndRealizationsDiffer) {
  const rng::CounterStream a(1, 0, 0), b(1, 1, 0), c(1, 0, 1), d(2, 0, 0);
  EXPECT_NE(a.block(0), b.block(0));
  EXPECT_NE(a.block(0), c.block(0));
  EXPECT_NE(a.block(0), d.block(0));
  EXPECT_EQ(a.block(7), rng::CounterStream(1, 0, 0).block(7));
}

TEST(CounterStream, NormalMoments) {
  const rng::CounterStream g(2024, 0, 3);
  const std::size_t n = 1'000'000;
  double m1 = 0, m2 = 0, m3 = 0, m4 = 0;
  for (std::size_t i = 0; i < n / 2; ++i) {
    const auto [x, y] = g.normal_pair(i);
    for (double v : {x, y}) {
      m1 += v;
      m2 += v * v;
      m3 += v * v * v;
      m4 += v * v * v * v;
    }
  }
  m1 /= n, m2 /= n, m3 /= n, m4 /= n;
  EXPECT_NEAR(m1, 0.0, 5.0 / std::sqrt(double(n)));
  EXPECT_NEAR(m2, 1.0, 5.0 * std::sqrt(2.0 / n));
  EXPECT_NEAR(m3, 0.0, 5.0 * std::sqrt(15.0 / n));
  EXPECT_NEAR(m4, 3.0, 5.0 * std::sqrt(96.0 / n));
}

TEST(Cloud, Validation) {
  EXPECT_THROW((CloudSpec{0.0, 8e-3, 10}.validate()), std::invalid_argument);
  EXPECT_THROW((CloudSpec{1e-3, 8e-3, 0}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((CloudSpec{1e-3, -8e-3, 1}.validate()));
}

TEST(Cloud, PointCloud) {
  const auto r = sample_realization({1e-300, 8e-3, 1}, 3, 0);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r.z_positions[0], 8e-3);
}

TEST(Cloud, OddAtomCount) {
  const auto r = sample_realization({1e-3, 0.0, 7}, 3, 0);
  EXPECT_EQ(r.size(), 7u);
  // prefix property: atom j does not depend on the atom count
  const auto r8 = sample_realization({1e-3, 0.0, 8}, 3, 0);
  EXPECT_EQ(r.z_positions, std::vector<double>(r8.z_positions.begin(), r8.z_positions.begin() + 7));
}

TEST(Cloud, MillionAtomStatistics) {
  const CloudSpec c{0.9e-3, 8e-3, 1'000'000};
  const auto r = sample_realization(c, 42, 0);
  const double n = static_cast<double>(r.size());
  const double mean = std::accumulate(r.z_positions.begin(), r.z_positions.end(), 0.0) / n;
  double m2 = 0, m3 = 0, m4 = 0;
  for (double z : r.z_positions) {
    const double d = z - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n, m3 /= n, m4 /= n;
  EXPECT_NEAR(mean, c.mirror_distance_h, 5.0 * c.sigma_z / std::sqrt(n));
  EXPECT_NEAR(std::sqrt(m2), c.sigma_z, 0.01 * c.sigma_z);
  EXPECT_LT(std::abs(m3 / std::pow(m2, 1.5)), 0.01);
  EXPECT_LT(std::abs(m4 / (m2 * m2) - 3.0), 0.02);
}

TEST(Cloud, Determinism) {
  const CloudSpec c{0.9e-3, 8e-3, 1000};
  EXPECT_EQ(sample_realization(c, 42, 0).z_positions, sample_realization(c, 42, 0).z_positions);
  EXPECT_NE(sample_realization(c, 42, 0).z_positions, sample_realization(c, 42, 1).z_positions);
  EXPECT_NE(sample_realization(c, 42, 0).z_positions, sample_realization(c, 43, 0).z_positions);
}

TEST(RealizationStream, MatchesDirectSampling) {
  const CloudSpec c{0.9e-3, 8e-3, 500};
  const auto one = realization_stream(c, 9, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].z_positions, sample_realization(c, 9, 0).z_positions);
  std::size_t i = 0;
  for (const auto& r : realization_stream(c, 9, 5)) {
    EXPECT_EQ(r.index, i);
    EXPECT_EQ(r.z_positions, sample_realization(c, 9, i).z_positions);
    ++i;
  }
  EXPECT_EQ(i, 5u);
  EXPECT_NE(realization_stream(c, 1, 1)[0].z_positions, realization_stream(c, 2, 1)[0].z_positions);
}

TEST(RealizationStream, StandardErrorShrinksWithCount) {
  // statistic: mean over atoms of cos^2(k z cos theta0); compare spread of single
  // realizations with spread of 200-realization averages
  const CloudSpec c{0.9e-3, 8e-3, 50};
  const double kc = TransitionSpec{}.wavenumber() * std::cos(1.0 * units::deg);
  auto stat = [&](const Realization& r) {
    double s = 0;
    for (double z : r.z_positions) s += std::pow(std::cos(kc * z), 2);
    return s / static_cast<double>(r.size());
  };
  const std::size_t groups = 60, per = 200;
  const auto stream = realization_stream(c, 77, groups * per);
  std::vector<double> singles, means;
  for (std::size_t g = 0; g < groups; ++g) {
    double acc = 0;
    for (std::size_t j = 0; j < per; ++j) {
      const double v = stat(stream[g * per + j]);
      acc += v;
      if (j == 0) singles.push_back(v);
    }
    means.push_back(acc / per);
  }
  auto sd = [](const std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (v.size() - 1));
  };
  // per-realization spread is known exactly: var(cos^2) = 1/8 for a uniform phase
  const double sd_single = std::sqrt(0.125 / c.atom_count);
  EXPECT_NEAR(sd(singles) / sd_single, 1.0, 0.3);
  EXPECT_NEAR(sd(means) / sd_single * std::sqrt(double(per)), 1.0, 0.3);
}

TEST(PairwiseSum, AccurateAndOrderFixed) {
  const std::size_t n = 1'000'001;
  const double v = pairwise_sum<double>(n, [](std::size_t) { return 0.1; });
  EXPECT_NEAR(v, 0.1 * n, 1e-9);
  EXPECT_EQ(pairwise_sum<double>(0, [](std::size_t) { return 1.0; }), 0.0);
  const auto f = [](std::size_t i) { return 1.0 / (1.0 + i); };
  EXPECT_EQ(pairwise_sum<double>(n, f), pairwise_sum<double>(n, f));
}

TEST(ParallelFor, CoversEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(1000);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, RethrowsFirstFailure) {
  EXPECT_THROW(parallel_for(100, 3,
                            [](std::size_t i) {
                              if (i == 17) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(ParallelFor, ResolveThreads) {
  EXPECT_EQ(resolve_threads(3), 3u);
  EXPECT_GE(resolve_threads(0), 1u);
}
