#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "common.hpp"
#include "mcbs/fringe.hpp"
#include "mcbs/radiation.hpp"

using namespace mcbs;
using namespace testing_geometry;

namespace {

// Fast-variable oracle: for sigma_z >> lambda the standing-wave phase of an atom is uniform,
// so disorder averages reduce to integrals over one period. Midpoint rule, exponentially accurate.
template <typename F>
double phase_average(F f, int n = 200000) {
  double acc = 0;
  for (int i = 0; i < n; ++i) acc += f(pi * (i + 0.5) / n);
  return acc / n;
}
double w_tot(double x, double s) { return 4 * s * x / (1 + s * x); }
double w_ela(double x, double s) { return 4 * s * x / ((1 + s * x) * (1 + s * x)); }
double oracle_background(bool elastic, double s) {
  return 0.5 * phase_average([&](double p) {
           const double x = std::cos(p) * std::cos(p);
           return elastic ? w_ela(x, s) : w_tot(x, s);
         });
}
double oracle_contrast(bool elastic, double s) {
  const double num = phase_average([&](double p) {
    const double x = std::cos(p) * std::cos(p);
    return (elastic ? w_ela(x, s) : w_tot(x, s)) * std::cos(2 * p);
  });
  return num / oracle_background(elastic, s);
}

Realization random_realization(std::size_t n, std::uint64_t seed) {
  return sample_realization({sigma_z, h, n}, seed, 0);
}

AngularGrid symmetric_xi_grid(std::size_t points) {
  // uniform in (cos theta0 - cos theta) / sin theta0; this coordinate stops at -theta0/2
  // (theta = 0), so the span is 1.8 Phi rather than 3 Phi
  AngularGrid g;
  g.center = theta0;
  for (std::size_t i = 0; i < points; ++i) {
    const double xi = -1.8 * phi + 3.6 * phi * i / (points - 1);
    g.angles.push_back(std::acos(std::cos(theta0) - xi * std::sin(theta0)));
  }
  return g;
}

}  // namespace

TEST(Oracle, ClosedFormsAgree) {
  for (double s : {0.01, 1.0, 20.0, 100.0}) {
    EXPECT_NEAR(oracle_background(false, s), 2 * (1 - 1 / std::sqrt(1 + s)), 1e-12);
    EXPECT_NEAR(oracle_background(true, s), s / std::pow(1 + s, 1.5), 1e-12);
  }
  EXPECT_NEAR(oracle_contrast(false, 20.0), 0.35826, 1e-5);
  EXPECT_NEAR(oracle_contrast(true, 20.0), -0.69532, 1e-5);
}

TEST(Geometry, LabNumbers) {
  EXPECT_NEAR(fringe_period(theta0, k, h) / units::mrad, 1.65083, 1e-5);
  EXPECT_NEAR(envelope_half_width(theta0, k, sigma_z) / units::mrad, 4.67091, 1e-5);
  EXPECT_NEAR(fringe_count(h, sigma_z), 2.83, 0.005);
  EXPECT_NEAR(mirror_distance_from_period(fringe_period(theta0, k, h), theta0, k), h, 1e-15);
  EXPECT_NEAR(cloud_size_from_envelope(phi, theta0, k), sigma_z, 1e-15);
}

TEST(Geometry, ReducedAngle) {
  EXPECT_EQ(reduced_angle(theta0, theta0, AngleCoordinate::cosine_exact), 0.0);
  const double d = 1e-6;
  EXPECT_NEAR(reduced_angle(theta0 + d, theta0, AngleCoordinate::cosine_exact), d, 1e-4 * d);
  EXPECT_EQ(reduced_angle(theta0 + d, theta0, AngleCoordinate::small_angle), theta0 + d - theta0);
  EXPECT_EQ(angle_coordinate_from_string("small_angle"), AngleCoordinate::small_angle);
  EXPECT_THROW(angle_coordinate_from_string("x"), std::invalid_argument);
}

TEST(Grid, MakeAndValidate) {
  const auto g = default_grid(theta0, k, sigma_z);
  EXPECT_EQ(g.size(), 2001u);
  EXPECT_TRUE(g.spans(theta0 - 3 * phi + 1e-12, theta0 + 3 * phi - 1e-12));
  EXPECT_NO_THROW(g.validate());
  AngularGrid bad{{0.1, 0.1}, 0.1};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(make_grid(0.0, 1.0, 1), std::invalid_argument);
}

TEST(Sums, BinnedExpansionMatchesDirect) {
  const auto r = random_realization(20000, 3);
  const auto grid = default_grid(theta0, k, sigma_z, 301);
  for (double s : {0.01, 20.0}) {
    const auto w = atom_weights(r, PatternModel::total, s, theta0, tr);
    const auto a = weighted_cos2_sum(r.z_positions, w, grid, k, SumMethod::direct);
    const auto b = weighted_cos2_sum(r.z_positions, w, grid, k, SumMethod::binned_expansion);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i], 1e-10 * a[i]);
  }
}

TEST(Sums, BinnedExpansionWideCloudAndNegativeH) {
  const auto r = sample_realization({3e-3, -20e-3, 5000}, 8, 0);
  const auto grid = make_grid(theta0, 0.02, 101);
  std::vector<double> w(r.size(), 1.0);
  const auto a = weighted_cos2_sum(r.z_positions, w, grid, k, SumMethod::direct);
  const auto b = weighted_cos2_sum(r.z_positions, w, grid, k, SumMethod::binned_expansion);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], a[i], 1e-10);
}

TEST(Patterns, ElasticNeverExceedsTotal) {
  const auto grid = default_grid(theta0, k, sigma_z, 201);
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = random_realization(500, 100 + trial);
    const double s = std::pow(10.0, std::uniform_real_distribution<double>(-4, 4)(gen));
    const auto tot = intensity_total(r, grid, s, theta0, tr);
    const auto ela = intensity_elastic(r, grid, s, theta0, tr);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      EXPECT_GE(ela.intensity[i], 0.0);
      EXPECT_LE(ela.intensity[i], tot.intensity[i]);
    }
  }
  const auto r = random_realization(500, 7);
  EXPECT_EQ(intensity_total(r, grid, 0.0, theta0, tr).intensity, intensity_elastic(r, grid, 0.0, theta0, tr).intensity);
}

TEST(Patterns, LinearRegimeExpansion) {
  // (4 s / N) sum cos^2(k z cos theta0) cos^2(k z cos theta), written out directly
  const auto r = random_realization(2000, 4);
  const auto grid = default_grid(theta0, k, sigma_z, 101);
  const double s = 1e-3;
  const auto tot = intensity_total(r, grid, s, theta0, tr);
  const auto ela = intensity_elastic(r, grid, s, theta0, tr);
  const double kc0 = k * std::cos(theta0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double lin = 0;
    for (double z : r.z_positions)
      lin += std::pow(std::cos(kc0 * z), 2) * std::pow(std::cos(k * std::cos(grid.angles[i]) * z), 2);
    lin *= 4 * s / r.size();
    const double rel = (lin - tot.intensity[i]) / lin;
    EXPECT_GE(rel, 0.0);
    EXPECT_LE(rel, s);
    EXPECT_LE((tot.intensity[i] - ela.intensity[i]) / tot.intensity[i], 2 * s);
  }
}

TEST(Patterns, SaturatedLimit) {
  const auto grid = default_grid(theta0, k, sigma_z, 101);
  const auto one = limit_pattern_infinite_s(Realization{{0.0}, 0, 0}, grid, tr);
  for (double v : one.intensity) EXPECT_NEAR(v, 4.0, 1e-12);

  const auto r = random_realization(1'000'000, 5);
  const auto lim = limit_pattern_infinite_s(r, grid, tr);
  for (double v : lim.intensity) EXPECT_NEAR(v, 2.0, 0.02);

  // at s = 1e6 the oracle predicts a background deficit of 1/sqrt(1+s) and a residual fringe
  // of contrast ~2/sqrt(s), both about 1e-3
  const double s = 1e6;
  const auto tot = intensity_total(r, grid, s, theta0, tr);
  const double bound = 1 / std::sqrt(1 + s) + std::abs(oracle_contrast(false, s)) / 2;
  double worst = 0;
  for (std::size_t i = 0; i < grid.size(); ++i)
    worst = std::max(worst, std::abs(tot.intensity[i] / lim.intensity[i] - 1));
  EXPECT_LT(worst, 1.3 * bound);
  EXPECT_NEAR(pattern_background(tot, theta0, phi) / pattern_background(lim, theta0, phi), 1 - 1 / std::sqrt(1 + s),
              2e-4);
}

TEST(Patterns, AveragedPatternIsSymmetricInReducedAngle) {
  SimulationRequest req;
  req.cloud = {sigma_z, h, 200'000};
  req.grid = symmetric_xi_grid(301);
  req.s = 1.0;
  req.theta0 = theta0;
  req.transition = tr;
  req.realizations = 20;
  const auto p = simulate_average(req);
  int outliers = 0;
  const std::size_t m = p.size();
  for (std::size_t i = 0; i < m / 2; ++i) {
    const std::size_t j = m - 1 - i;
    const double se = std::hypot(p.std_error[i], p.std_error[j]);
    if (std::abs(p.intensity[i] - p.intensity[j]) > 3 * se) ++outliers;
  }
  EXPECT_LE(outliers, 5);
}

TEST(SingleAtom, AmplitudeModulationFlattens) {
  const double kc = k * std::cos(theta0);
  const double antinode = 0.0, half = pi / (4 * kc), node = pi / (2 * kc);
  auto ratio = [&](double s) { return single_atom_amplitude(half, s, theta0, tr) / single_atom_amplitude(antinode, s, theta0, tr); };
  // closed form 0.5 (1 + s) / (1 + s / 2)
  EXPECT_NEAR(ratio(20.0), 0.5 * 21.0 / 11.0, 1e-12);
  EXPECT_NEAR(ratio(20.0), 0.954545, 1e-6);
  EXPECT_GT(ratio(20.0), 0.9);
  EXPECT_NEAR(ratio(0.01), 0.5 * 1.01 / 1.005, 1e-12);
  EXPECT_NEAR(single_atom_amplitude(node, 0.01, theta0, tr), 0.0, 1e-20);

  for (double z : {1e-7, 3e-7, 2.2e-6})
    EXPECT_LE(single_atom_amplitude(z, 0.01, theta0, tr), single_atom_amplitude(antinode, 0.01, theta0, tr));
}

TEST(SingleAtom, FringeShape) {
  const double kc = k * std::cos(theta0);
  const double z = 2000 * pi / kc;  // antinode, far from the mirror
  const auto grid = make_grid(theta0, 0.01, 401);
  const double s = 1e-6;
  const auto p = single_atom_fringe(z, grid, s, theta0, tr);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double c = std::cos(k * z * std::cos(grid.angles[i]));
    EXPECT_NEAR(p.intensity[i], 4 * s * c * c / (1 + s), 1e-15);
  }
  const auto zero = single_atom_fringe(pi / (2 * kc), grid, 0.5, theta0, tr, PatternModel::elastic);
  for (double v : zero.intensity) EXPECT_NEAR(v, 0.0, 1e-25);
  EXPECT_THROW(single_atom_fringe(z, grid, s, theta0, tr, PatternModel::saturated_limit), std::invalid_argument);
}

TEST(SingleAtom, Family) {
  const auto grid = make_grid(theta0, 2e-3, 101);
  const auto fam = single_atom_family(8, 3.0, grid, 20.0, theta0, tr);
  EXPECT_EQ(fam.patterns.size(), 8u);
  EXPECT_EQ(fam.average.realizations_averaged, 8u);
}

TEST(Analytic, PeakAndPeriod) {
  const auto grid = make_grid(theta0, 3 * phi, 2001);
  const auto p = analytic_linear_intensity(grid, theta0, h, sigma_z, 0.01, tr);
  EXPECT_NEAR(p.intensity[1000], 0.01 * 1.5, 1e-15);
  EXPECT_NEAR(pattern_background(p, theta0, phi), 0.01, 1e-6);
  // first minimum half a period from the centre (cosine-exact coordinate)
  const double xi_min = 0.5 * fringe_period(theta0, k, h);
  const double th = std::acos(std::cos(theta0) - xi_min * std::sin(theta0));
  const double expected = 0.01 * (1 - 0.5 * std::exp(-2 * xi_min * xi_min / (phi * phi)));
  EXPECT_NEAR(analytic_linear_value(th, theta0, h, sigma_z, 0.01, k), expected, 1e-12 * expected);
}

TEST(Averaging, IdenticalPatternsAndErrors) {
  const auto grid = make_grid(theta0, 1e-3, 11);
  const auto p = analytic_linear_intensity(grid, theta0, h, sigma_z, 0.01, tr);
  AngularPattern q = p;
  q.model = PatternModel::total;
  const std::vector<AngularPattern> same(5, q);
  const auto avg = disorder_average(same);
  EXPECT_EQ(avg.intensity, q.intensity);
  for (double e : avg.std_error) EXPECT_EQ(e, 0.0);
  EXPECT_THROW(disorder_average(std::span<const AngularPattern>{}), std::invalid_argument);
  std::vector<AngularPattern> mixed{q, q};
  mixed[1].s = 2.0;
  EXPECT_THROW(disorder_average(mixed), std::invalid_argument);
}

TEST(Averaging, VarianceFallsAsOneOverCount) {
  SimulationRequest req;
  req.cloud = {sigma_z, h, 200};
  req.grid = make_grid(theta0, 3 * phi, 41);
  req.theta0 = theta0;
  req.transition = tr;
  req.s = 0.5;
  // spread of 10-realization means across 40 independent groups vs single realizations
  std::vector<double> singles, tens;
  for (int g = 0; g < 40; ++g) {
    req.seed = 1000 + g;
    req.realizations = 10;
    const auto p = simulate_average(req);
    tens.push_back(p.intensity[0]);
    req.realizations = 1;
    singles.push_back(simulate_average(req).intensity[0]);
  }
  auto var = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= v.size();
    for (double x : v) s += (x - m) * (x - m);
    return s / (v.size() - 1);
  };
  EXPECT_NEAR(var(singles) / var(tens), 10.0, 5.0);
}

TEST(Saturation, ElasticBackgroundFollowsOracle) {
  // ratio elastic/total of the disorder-averaged background; oracle slope about -0.52
  SimulationRequest req;
  req.cloud = {sigma_z, h, 200'000};
  req.grid = make_grid(theta0, 3 * phi, 121);
  req.theta0 = theta0;
  req.transition = tr;
  req.realizations = 4;
  const std::vector<double> s{1e2, 1e3, 1e4};
  std::vector<PatternModel> models;
  std::vector<double> svals;
  for (double v : s) {
    models.insert(models.end(), {PatternModel::total, PatternModel::elastic});
    svals.insert(svals.end(), {v, v});
  }
  const auto pats = simulate_models(req, models, svals);
  std::vector<double> ratio;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double r = pattern_background(pats[2 * i + 1], theta0, phi) / pattern_background(pats[2 * i], theta0, phi);
    const double oracle = oracle_background(true, s[i]) / oracle_background(false, s[i]);
    EXPECT_NEAR(r, oracle, 0.01 * oracle);
    ratio.push_back(r);
  }
  const double slope = std::log(ratio[2] / ratio[0]) / std::log(s[2] / s[0]);
  const double oracle_slope = std::log((oracle_background(true, 1e4) / oracle_background(false, 1e4)) /
                                       (oracle_background(true, 1e2) / oracle_background(false, 1e2))) /
                              std::log(100.0);
  EXPECT_NEAR(oracle_slope, -0.52, 0.01);
  EXPECT_NEAR(slope, oracle_slope, 0.01);
}

TEST(Saturation, UnsaturatedFraction) {
  for (double s : {1e2, 1e4, 1e6}) EXPECT_NEAR(unsaturated_fraction(s), 2 * std::asin(1 / std::sqrt(s)) / pi, 1e-5);
  EXPECT_EQ(unsaturated_fraction(0.5), 1.0);
  const double slope = std::log(unsaturated_fraction(1e6) / unsaturated_fraction(1e2)) / std::log(1e4);
  EXPECT_NEAR(slope, -0.5, 0.05);
  EXPECT_THROW(unsaturated_fraction(-1.0), std::invalid_argument);
}

TEST(Saturation, ContrastCurvesOrderedAndMonotone) {
  CurveSetup setup;
  setup.atom_count = 200'000;
  setup.realizations = 8;
  setup.grid_points = 801;
  const std::vector<double> s{0.01, 0.1, 1, 3, 10, 30, 100};
  const auto tot = contrast_vs_saturation(s, setup, PatternModel::total);
  const auto ela = contrast_vs_saturation(s, setup, PatternModel::elastic);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_TRUE(tot.converged[i]);
    EXPECT_TRUE(ela.converged[i]);
    EXPECT_NEAR(tot.contrast_values[i], oracle_contrast(false, s[i]), 0.02) << "s = " << s[i];
    EXPECT_NEAR(ela.contrast_values[i], oracle_contrast(true, s[i]), 0.03) << "s = " << s[i];
    if (i > 0) {
      EXPECT_LE(tot.contrast_values[i], tot.contrast_values[i - 1] + 2 * tot.uncertainty[i]);
    }
    if (s[i] >= 1) {
      EXPECT_LT(ela.contrast_values[i], tot.contrast_values[i]);
      if (i > 0) {
        const double drop_tot = tot.contrast_values[i - 1] - tot.contrast_values[i];
        const double drop_ela = ela.contrast_values[i - 1] - ela.contrast_values[i];
        EXPECT_GT(drop_ela, drop_tot) << "s = " << s[i];
      }
    }
  }
  EXPECT_THROW(contrast_vs_saturation(std::vector<double>{1.0, 1.0}, setup, PatternModel::total),
               std::invalid_argument);
}

TEST(TransverseBeam, FactorsAndEffect) {
  const auto r = random_realization(50'000, 12);
  const TransverseBeam beam;
  const auto f = transverse_saturation_factors(r, beam);
  EXPECT_EQ(f, transverse_saturation_factors(r, beam));
  for (double v : f) {
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const auto grid = default_grid(theta0, k, sigma_z, 61);
  RadiationOptions opt;
  opt.beam = beam;
  const auto with = intensity_total(r, grid, 5.0, theta0, tr, opt);
  const auto without = intensity_total(r, grid, 5.0, theta0, tr);
  EXPECT_LT(pattern_background(with, theta0, phi), pattern_background(without, theta0, phi));
  EXPECT_THROW(transverse_saturation_factors(r, {0.0, 1e-3}), std::invalid_argument);
}

TEST(Determinism, IndependentOfThreadCount) {
  SimulationRequest req;
  req.cloud = {sigma_z, h, 30'000};
  req.grid = default_grid(theta0, k, sigma_z, 201);
  req.theta0 = theta0;
  req.transition = tr;
  req.realizations = 7;
  req.seed = 99;
  const std::vector<PatternModel> models{PatternModel::total, PatternModel::elastic};
  const std::vector<double> s{2.0, 2.0};
  const auto a = simulate_models(req, models, s, 1);
  const auto b = simulate_models(req, models, s, 4);
  const auto c = simulate_models(req, models, s, 3);
  for (std::size_t m = 0; m < 2; ++m) {
    EXPECT_EQ(a[m].intensity, b[m].intensity);
    EXPECT_EQ(a[m].std_error, b[m].std_error);
    EXPECT_EQ(a[m].intensity, c[m].intensity);
  }
}

TEST(Validation, BadInputs) {
  const auto r = random_realization(10, 1);
  const auto grid = default_grid(theta0, k, sigma_z, 11);
  EXPECT_THROW(intensity_total(r, grid, -1.0, theta0, tr), std::invalid_argument);
  EXPECT_THROW(realization_pattern(r, grid, PatternModel::analytic_linear, 1.0, theta0, tr), std::invalid_argument);
  EXPECT_THROW(pattern_model_from_string("nope"), std::invalid_argument);
  EXPECT_EQ(pattern_model_from_string("elastic"), PatternModel::elastic);
}
