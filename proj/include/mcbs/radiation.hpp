#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mcbs/cloud.hpp"
#include "mcbs/parallel.hpp"
#include "mcbs/physics.hpp"
#include "mcbs/summation.hpp"

namespace mcbs {

// ---------------------------------------------------------------------------
// Geometry relations of the linear-regime fringe pattern
// ---------------------------------------------------------------------------

/// Angular fringe period pi / (theta0 k |h|). Infinite for h = 0.
inline double fringe_period(double theta0, double k, double h) {
  return pi / (theta0 * k * std::abs(h));
}

/// 1/e^2 half-width of the Gaussian fringe envelope, 1 / (theta0 k sigma_z).
inline double envelope_half_width(double theta0, double k, double sigma_z) { return 1.0 / (theta0 * k * sigma_z); }

/// Number of fringes expected under the envelope, |h| / (pi sigma_z).
inline double fringe_count(double h, double sigma_z) { return std::abs(h) / (pi * sigma_z); }

/// Mirror distance implied by a fringe period, pi / (k theta0 period).
inline double mirror_distance_from_period(double period, double theta0, double k) { return pi / (k * theta0 * period); }

/// Cloud length implied by an envelope half-width, 1 / (theta0 k phi).
inline double cloud_size_from_envelope(double phi, double theta0, double k) { return 1.0 / (theta0 * k * phi); }

/// Angle variable used by the linear-regime fringe formula.
/// `small_angle` is theta - theta0 as written in the closed form; `cosine_exact` is
/// (cos theta0 - cos theta) / sin theta0, which equals theta - theta0 to first order and makes
/// the Gaussian disorder average exactly fringe-shaped for any |theta - theta0|.
enum class AngleCoordinate { cosine_exact, small_angle };

inline double reduced_angle(double theta, double theta_c, AngleCoordinate coord) {
  if (coord == AngleCoordinate::small_angle) return theta - theta_c;
  // cos a - cos b written without cancellation.
  return 2.0 * std::sin(0.5 * (theta + theta_c)) * std::sin(0.5 * (theta - theta_c)) / std::sin(theta_c);
}

/// d(reduced_angle)/d(theta_c).
inline double reduced_angle_dcenter(double theta, double theta_c, AngleCoordinate coord) {
  if (coord == AngleCoordinate::small_angle) return -1.0;
  return -1.0 - reduced_angle(theta, theta_c, coord) * std::cos(theta_c) / std::sin(theta_c);
}

inline std::string_view to_string(AngleCoordinate c) {
  return c == AngleCoordinate::small_angle ? "small_angle" : "cosine_exact";
}

inline AngleCoordinate angle_coordinate_from_string(std::string_view s) {
  if (s == "small_angle") return AngleCoordinate::small_angle;
  if (s == "cosine_exact") return AngleCoordinate::cosine_exact;
  throw std::invalid_argument("unknown angle coordinate '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Grids and patterns
// ---------------------------------------------------------------------------

/// Polar angles from the mirror normal, strictly increasing.
struct AngularGrid {
  std::vector<double> angles;
  double center = 0.0;  // theta0

  std::size_t size() const { return angles.size(); }

  void validate() const {
    if (angles.empty()) throw std::invalid_argument("angular grid is empty");
    for (std::size_t i = 1; i < angles.size(); ++i)
      if (!(angles[i] > angles[i - 1])) throw std::invalid_argument("angular grid must be strictly increasing");
  }

  bool spans(double lo, double hi) const { return !angles.empty() && angles.front() <= lo && angles.back() >= hi; }
};

inline AngularGrid make_grid(double center, double half_span, std::size_t points) {
  if (points < 2) throw std::invalid_argument("grid needs at least 2 points");
  if (!(half_span > 0.0)) throw std::invalid_argument("grid half-span must be > 0");
  AngularGrid g;
  g.center = center;
  g.angles.resize(points);
  const double step = 2.0 * half_span / static_cast<double>(points - 1);
  for (std::size_t i = 0; i < points; ++i) g.angles[i] = center - half_span + step * static_cast<double>(i);
  return g;
}

/// 2001 points over theta0 +- 3 Phi.
inline AngularGrid default_grid(double theta0, double k, double sigma_z, std::size_t points = 2001) {
  return make_grid(theta0, 3.0 * envelope_half_width(theta0, k, sigma_z), points);
}

enum class PatternModel { total, elastic, analytic_linear, single_atom, saturated_limit };

inline std::string_view to_string(PatternModel m) {
  switch (m) {
    case PatternModel::total: return "total";
    case PatternModel::elastic: return "elastic";
    case PatternModel::analytic_linear: return "analytic_linear";
    case PatternModel::single_atom: return "single_atom";
    case PatternModel::saturated_limit: return "saturated_limit";
  }
  return "unknown";
}

inline PatternModel pattern_model_from_string(std::string_view s) {
  for (auto m : {PatternModel::total, PatternModel::elastic, PatternModel::analytic_linear, PatternModel::single_atom,
                 PatternModel::saturated_limit})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown model '" + std::string(s) + "'");
}

/// Intensity in units of I0 on an angular grid. `std_error` is empty unless the pattern is a
/// disorder average of more than one realization.
struct AngularPattern {
  AngularGrid grid;
  std::vector<double> intensity;
  std::vector<double> std_error;
  PatternModel model = PatternModel::total;
  double s = 0.0;
  std::size_t realizations_averaged = 1;

  std::size_t size() const { return intensity.size(); }
};

// ---------------------------------------------------------------------------
// Per-atom weights
// ---------------------------------------------------------------------------

/// Single-atom fringe amplitude 8 <sigma^dagger sigma> in I0 units, with x = cos^2(k z cos theta0):
/// 4 s x / (1 + s x).
inline double total_weight(double x, double s) { return 4.0 * s * x / (1.0 + s * x); }

/// Elastic part 8 |<sigma>|^2: 4 s x / (1 + s x)^2.
inline double elastic_weight(double x, double s) {
  const double d = 1.0 + s * x;
  return 4.0 * s * x / (d * d);
}

inline double atom_weight(PatternModel model, double x, double s) {
  switch (model) {
    case PatternModel::total:
    case PatternModel::single_atom: return total_weight(x, s);
    case PatternModel::elastic: return elastic_weight(x, s);
    case PatternModel::saturated_limit: return 4.0;
    case PatternModel::analytic_linear: break;
  }
  throw std::invalid_argument("atom_weight: model has no per-atom weight");
}

/// Gaussian transverse structure of the probe: per-atom saturation s exp(-2 rho^2 / w^2) with
/// (x, y) drawn from an isotropic Gaussian cloud of 1/sqrt(e) radius `cloud_radius`.
struct TransverseBeam {
  double waist = 1.5e-3;
  double cloud_radius = 0.9e-3;
};

/// Per-atom factors exp(-2 rho_j^2 / w^2), a pure function of (seed, realization index).
inline std::vector<double> transverse_saturation_factors(const Realization& r, const TransverseBeam& beam) {
  if (!(beam.waist > 0.0) || !(beam.cloud_radius > 0.0))
    throw std::invalid_argument("transverse beam: waist and cloud radius must be > 0");
  const rng::CounterStream gen(r.seed, streams::transverse, r.index);
  std::vector<double> f(r.size());
  const double scale = beam.cloud_radius / beam.waist;
  for (std::size_t j = 0; j < f.size(); ++j) {
    const auto [gx, gy] = gen.normal_pair(j);
    f[j] = std::exp(-2.0 * scale * scale * (gx * gx + gy * gy));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Far-field sums
// ---------------------------------------------------------------------------

enum class SumMethod { automatic, direct, binned_expansion };

namespace detail {

inline constexpr int kExpansionOrder = 18;

struct MomentVec {
  std::array<cplx, kExpansionOrder> m{};
  MomentVec& operator+=(const MomentVec& o) {
    for (int p = 0; p < kExpansionOrder; ++p) m[p] += o.m[p];
    return *this;
  }
};

/// sum_j w_j exp(2 i k z_j u_m) for all m, by grouping atoms into z-bins narrow enough that
/// exp(2 i k zeta v) (zeta = offset from bin centre, v = u - u_c) is a converged Taylor series
/// of kExpansionOrder terms (|2 k zeta v| <= 0.5).
inline std::vector<cplx> coherent_sum_binned(std::span<const double> z, std::span<const double> w,
                                             std::span<const double> u, double k) {
  const auto [umin_it, umax_it] = std::minmax_element(u.begin(), u.end());
  const double u_c = 0.5 * (*umin_it + *umax_it);
  const double v_max = 0.5 * (*umax_it - *umin_it);
  const auto [zmin_it, zmax_it] = std::minmax_element(z.begin(), z.end());
  const double z_lo = *zmin_it;
  const double z_span = *zmax_it - z_lo;

  double bin_width = v_max > 0.0 ? 0.5 / (k * v_max) : std::max(z_span, 1.0);
  std::size_t bins = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(z_span / bin_width)));
  if (bins == 1) bin_width = std::max(z_span, bin_width);
  const double half = 0.5 * bin_width;

  // Counting sort of atom indices by bin.
  std::vector<std::size_t> start(bins + 1, 0), order(z.size());
  auto bin_of = [&](double zj) {
    return std::min(bins - 1, static_cast<std::size_t>((zj - z_lo) / bin_width));
  };
  for (double zj : z) ++start[bin_of(zj) + 1];
  for (std::size_t b = 0; b < bins; ++b) start[b + 1] += start[b];
  {
    std::vector<std::size_t> fill(start.begin(), start.end() - 1);
    for (std::size_t j = 0; j < z.size(); ++j) order[fill[bin_of(z[j])]++] = j;
  }

  std::vector<MomentVec> moments(bins);
  std::vector<double> centers(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    const double zc = z_lo + (static_cast<double>(b) + 0.5) * bin_width;
    centers[b] = zc;
    const std::size_t lo = start[b];
    moments[b] = pairwise_sum<MomentVec>(start[b + 1] - lo, [&](std::size_t i) {
      const std::size_t j = order[lo + i];
      MomentVec t;
      const double x = (z[j] - zc) / half;
      cplx c = w[j] * std::polar(1.0, 2.0 * k * z[j] * u_c);
      for (int p = 0; p < kExpansionOrder; ++p) {
        t.m[p] = c;
        c *= x;
      }
      return t;
    });
  }

  std::vector<cplx> out(u.size());
  const cplx i_unit{0.0, 1.0};
  for (std::size_t m = 0; m < u.size(); ++m) {
    const double v = u[m] - u_c;
    const cplx step = i_unit * (2.0 * k * half * v);
    std::array<cplx, kExpansionOrder> coef;
    coef[0] = 1.0;
    for (int p = 1; p < kExpansionOrder; ++p) coef[p] = coef[p - 1] * step / static_cast<double>(p);
    out[m] = pairwise_sum<cplx>(bins, [&](std::size_t b) {
      cplx acc{};
      for (int p = kExpansionOrder - 1; p >= 0; --p) acc += coef[p] * moments[b].m[p];
      return acc * std::polar(1.0, 2.0 * k * centers[b] * v);
    });
  }
  return out;
}

}  // namespace detail

/// (1/N) sum_j w_j cos^2(k z_j cos theta_m) for every grid angle.
inline std::vector<double> weighted_cos2_sum(std::span<const double> z, std::span<const double> w,
                                             const AngularGrid& grid, double k,
                                             SumMethod method = SumMethod::automatic) {
  if (z.size() != w.size()) throw std::invalid_argument("positions and weights differ in length");
  const std::size_t n = z.size(), m = grid.size();
  std::vector<double> out(m, 0.0);
  if (n == 0 || m == 0) return out;
  std::vector<double> u(m);
  for (std::size_t i = 0; i < m; ++i) u[i] = std::cos(grid.angles[i]);

  if (method == SumMethod::automatic) {
    const double direct_cost = static_cast<double>(n) * static_cast<double>(m);
    const double fast_cost = 40.0 * static_cast<double>(n) + 30.0 * static_cast<double>(m) * 200.0;
    method = direct_cost < fast_cost ? SumMethod::direct : SumMethod::binned_expansion;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (method == SumMethod::direct) {
    for (std::size_t i = 0; i < m; ++i) {
      const double ku = k * u[i];
      out[i] = inv_n * pairwise_sum<double>(n, [&](std::size_t j) {
                 const double c = std::cos(ku * z[j]);
                 return w[j] * c * c;
               });
    }
    return out;
  }
  // cos^2 a = (1 + cos 2a) / 2
  const double wsum = pairwise_sum<double>(n, [&](std::size_t j) { return w[j]; });
  const auto coh = detail::coherent_sum_binned(z, w, u, k);
  for (std::size_t i = 0; i < m; ++i) out[i] = 0.5 * inv_n * (wsum + coh[i].real());
  return out;
}

struct RadiationOptions {
  SumMethod method = SumMethod::automatic;
  std::optional<TransverseBeam> beam;  // off: uniform transverse drive
};

/// Per-atom weights of `model` for one realization.
inline std::vector<double> atom_weights(const Realization& r, PatternModel model, double s, double theta0,
                                        const TransitionSpec& tr, const RadiationOptions& opt = {}) {
  const double kc = tr.wavenumber() * std::cos(theta0);
  std::vector<double> w(r.size());
  std::vector<double> sat;
  if (opt.beam && model != PatternModel::saturated_limit) sat = transverse_saturation_factors(r, *opt.beam);
  for (std::size_t j = 0; j < w.size(); ++j) {
    const double c = std::cos(kc * r.z_positions[j]);
    const double sj = sat.empty() ? s : s * sat[j];
    w[j] = atom_weight(model, c * c, sj);
  }
  return w;
}

inline void check_saturation(double s) {
  if (!(s >= 0.0) || std::isnan(s)) throw std::invalid_argument("saturation parameter must be >= 0");
}

/// Pattern of one realization for a microscopic model (total, elastic, saturated_limit).
inline AngularPattern realization_pattern(const Realization& r, const AngularGrid& grid, PatternModel model, double s,
                                          double theta0, const TransitionSpec& tr,
                                          const RadiationOptions& opt = {}) {
  if (model == PatternModel::analytic_linear) throw std::invalid_argument("analytic model has no realization");
  if (model != PatternModel::saturated_limit) check_saturation(s);
  grid.validate();
  const auto w = atom_weights(r, model, s, theta0, tr, opt);
  AngularPattern p;
  p.grid = grid;
  p.intensity = weighted_cos2_sum(r.z_positions, w, grid, tr.wavenumber(), opt.method);
  p.model = model;
  p.s = model == PatternModel::saturated_limit ? std::numeric_limits<double>::infinity() : s;
  p.realizations_averaged = 1;
  return p;
}

/// Elastic + inelastic intensity (4s/N) sum_j cos^2(k z_j cos theta0) cos^2(k z_j cos theta) / (1 + s cos^2(k z_j cos theta0)).
inline AngularPattern intensity_total(const Realization& r, const AngularGrid& grid, double s, double theta0,
                                      const TransitionSpec& tr, const RadiationOptions& opt = {}) {
  return realization_pattern(r, grid, PatternModel::total, s, theta0, tr, opt);
}

/// Elastic-only intensity: as intensity_total with the denominator squared.
inline AngularPattern intensity_elastic(const Realization& r, const AngularGrid& grid, double s, double theta0,
                                        const TransitionSpec& tr, const RadiationOptions& opt = {}) {
  return realization_pattern(r, grid, PatternModel::elastic, s, theta0, tr, opt);
}

/// s -> infinity limit of intensity_total: (4/N) sum_j cos^2(k z_j cos theta).
inline AngularPattern limit_pattern_infinite_s(const Realization& r, const AngularGrid& grid, const TransitionSpec& tr,
                                               const RadiationOptions& opt = {}) {
  return realization_pattern(r, grid, PatternModel::saturated_limit, 0.0, 0.0, tr, opt);
}

/// Pattern of a single atom at height z (N = 1). model is total or elastic.
inline AngularPattern single_atom_fringe(double z, const AngularGrid& grid, double s, double theta0,
                                         const TransitionSpec& tr, PatternModel model = PatternModel::total) {
  if (model != PatternModel::total && model != PatternModel::elastic)
    throw std::invalid_argument("single_atom_fringe: model must be total or elastic");
  Realization r{{z}, 0, 0};
  auto p = realization_pattern(r, grid, model, s, theta0, tr, {SumMethod::direct, std::nullopt});
  p.model = model == PatternModel::total ? PatternModel::single_atom : PatternModel::elastic;
  return p;
}

/// Peak of a single-atom fringe over all angles: its per-atom weight.
inline double single_atom_amplitude(double z, double s, double theta0, const TransitionSpec& tr,
                                    PatternModel model = PatternModel::total) {
  const double c = std::cos(tr.wavenumber() * std::cos(theta0) * z);
  return atom_weight(model == PatternModel::single_atom ? PatternModel::total : model, c * c, s);
}

/// Linear-regime closed form s [1 + 1/2 exp(-2 (theta0 k sigma_z)^2 xi^2) cos(2 theta0 k h xi)],
/// xi = reduced_angle(theta, theta0). The prefactor makes the background equal s, the first-order
/// disorder-averaged background of the microscopic models.
inline double analytic_linear_value(double theta, double theta0, double h, double sigma_z, double s, double k,
                                    AngleCoordinate coord = AngleCoordinate::cosine_exact) {
  const double xi = reduced_angle(theta, theta0, coord);
  const double a = theta0 * k * sigma_z * xi;
  return s * (1.0 + 0.5 * std::exp(-2.0 * a * a) * std::cos(2.0 * theta0 * k * h * xi));
}

inline AngularPattern analytic_linear_intensity(const AngularGrid& grid, double theta0, double h, double sigma_z,
                                                double s, const TransitionSpec& tr,
                                                AngleCoordinate coord = AngleCoordinate::cosine_exact) {
  grid.validate();
  AngularPattern p;
  p.grid = grid;
  p.intensity.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i)
    p.intensity[i] = analytic_linear_value(grid.angles[i], theta0, h, sigma_z, s, tr.wavenumber(), coord);
  p.model = PatternModel::analytic_linear;
  p.s = s;
  p.realizations_averaged = 0;
  return p;
}

// ---------------------------------------------------------------------------
// Disorder averaging
// ---------------------------------------------------------------------------

/// Running pointwise mean and standard error; add() order fixes the floating-point result.
class PatternAverager {
 public:
  void add(const AngularPattern& p) {
    if (count_ == 0) {
      proto_ = p;
      mean_.assign(p.size(), 0.0);
      m2_.assign(p.size(), 0.0);
    } else {
      if (p.grid.angles != proto_.grid.angles) throw std::invalid_argument("disorder_average: grids differ");
      if (p.model != proto_.model) throw std::invalid_argument("disorder_average: models differ");
      if (!(p.s == proto_.s)) throw std::invalid_argument("disorder_average: saturation parameters differ");
    }
    ++count_;
    const double inv = 1.0 / static_cast<double>(count_);
    for (std::size_t i = 0; i < mean_.size(); ++i) {
      const double d = p.intensity[i] - mean_[i];
      mean_[i] += d * inv;
      m2_[i] += d * (p.intensity[i] - mean_[i]);
    }
  }

  std::size_t count() const { return count_; }

  AngularPattern result() const {
    if (count_ == 0) throw std::invalid_argument("disorder_average: no patterns");
    AngularPattern out = proto_;
    out.intensity = mean_;
    out.realizations_averaged = count_;
    out.std_error.assign(mean_.size(), 0.0);
    if (count_ > 1) {
      const double c = static_cast<double>(count_);
      for (std::size_t i = 0; i < mean_.size(); ++i) out.std_error[i] = std::sqrt(m2_[i] / (c - 1.0) / c);
    }
    return out;
  }

 private:
  AngularPattern proto_;
  std::vector<double> mean_, m2_;
  std::size_t count_ = 0;
};

inline AngularPattern disorder_average(std::span<const AngularPattern> patterns) {
  PatternAverager avg;
  for (const auto& p : patterns) avg.add(p);
  return avg.result();
}

struct SimulationRequest {
  CloudSpec cloud;
  AngularGrid grid;
  PatternModel model = PatternModel::total;
  double s = 0.01;
  double theta0 = 1.0 * units::deg;
  TransitionSpec transition;
  std::uint64_t seed = 0;
  std::size_t realizations = 50;
  RadiationOptions options;
};

/// Patterns for several models computed on the same realizations (common random numbers).
/// Realizations run in parallel; averaging happens in realization order, so the result does not
/// depend on `threads`.
inline std::vector<AngularPattern> simulate_models(const SimulationRequest& req, std::span<const PatternModel> models,
                                                   std::span<const double> s_values, unsigned threads = 0) {
  if (req.realizations < 1) throw std::invalid_argument("realizations must be >= 1");
  if (s_values.size() != models.size()) throw std::invalid_argument("simulate_models: one s per model");
  const auto stream = realization_stream(req.cloud, req.seed, req.realizations);
  std::vector<std::vector<AngularPattern>> slots(req.realizations);
  parallel_for(req.realizations, resolve_threads(static_cast<int>(threads)), [&](std::size_t i) {
    const Realization r = stream[i];
    slots[i].reserve(models.size());
    for (std::size_t m = 0; m < models.size(); ++m)
      slots[i].push_back(realization_pattern(r, req.grid, models[m], s_values[m], req.theta0, req.transition,
                                             req.options));
  });
  std::vector<AngularPattern> out;
  for (std::size_t m = 0; m < models.size(); ++m) {
    PatternAverager avg;
    for (const auto& slot : slots) avg.add(slot[m]);
    out.push_back(avg.result());
  }
  return out;
}

/// Disorder-averaged pattern of one microscopic model.
inline AngularPattern simulate_average(const SimulationRequest& req, unsigned threads = 0) {
  const std::array models{req.model};
  const std::array s{req.s};
  return simulate_models(req, models, s, threads).front();
}

/// Mean intensity over |theta - theta0| > 2 Phi.
inline double pattern_background(const AngularPattern& p, double theta0, double phi,
                                 AngleCoordinate coord = AngleCoordinate::cosine_exact) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (std::abs(reduced_angle(p.grid.angles[i], theta0, coord)) > 2.0 * phi) {
      sum += p.intensity[i];
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("pattern has no points outside 2 Phi");
  return sum / static_cast<double>(n);
}

/// Fraction of one standing-wave period where the local saturation denominator
/// 1 + s cos^2(phase) stays below 2, measured on `samples` uniformly spaced phases.
inline double unsaturated_fraction(double s, std::size_t samples = 1u << 22) {
  check_saturation(s);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double phase = pi * (static_cast<double>(i) + 0.5) / static_cast<double>(samples);
    const double c = std::cos(phase);
    if (1.0 + s * c * c < 2.0) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples);
}

/// Atoms uniformly spread over `periods` standing-wave periods from the mirror plane, one
/// single-atom pattern each, plus their mean (small-region illustration of single-atom fringes).
struct SingleAtomFamily {
  std::vector<double> z;
  std::vector<AngularPattern> patterns;
  AngularPattern average;
};

inline SingleAtomFamily single_atom_family(std::size_t atoms, double periods, const AngularGrid& grid, double s,
                                           double theta0, const TransitionSpec& tr,
                                           PatternModel model = PatternModel::total) {
  if (atoms < 1) throw std::invalid_argument("single_atom_family: need at least one atom");
  SingleAtomFamily fam;
  const double period = pi / (tr.wavenumber() * std::cos(theta0));
  PatternAverager avg;
  for (std::size_t j = 0; j < atoms; ++j) {
    const double z = periods * period * (static_cast<double>(j) + 0.5) / static_cast<double>(atoms);
    fam.z.push_back(z);
    fam.patterns.push_back(single_atom_fringe(z, grid, s, theta0, tr, model));
    avg.add(fam.patterns.back());
  }
  fam.average = avg.result();
  return fam;
}

}  // namespace mcbs
