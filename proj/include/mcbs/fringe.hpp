#pragma once

#include <Eigen/Dense>

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
#include <vector>

#include "mcbs/radiation.hpp"

namespace mcbs {

/// Thrown when a pattern carries no measurable fringe signal.
class NoFringeSignal : public std::runtime_error {
 public:
  NoFringeSignal() : std::runtime_error("no fringe signal") {}
};

struct FitHints {
  double theta0 = 1.0 * units::deg;  // expected fringe centre and incidence angle
  double wavenumber = TransitionSpec{}.wavenumber();
  std::optional<double> envelope_hint;  // Phi from geometry; sets the background window
  AngleCoordinate coordinate = AngleCoordinate::cosine_exact;
  int max_iterations = 200;
  double tolerance = 1e-10;  // on the relative parameter step
};

/// Fringe model B [1 + a exp(-2 xi^2 / Phi^2) cos(2 pi xi / Theta_f + phase)], xi = reduced angle about
/// the fitted centre. Contrast C = 2a, so the linear-regime closed form has C = 1; inverted fringes
/// (minimum at the centre) give C < 0.
struct FringeFitResult {
  double background = 0.0;
  double contrast = 0.0;
  double envelope_phi = 0.0;
  double period_theta_f = 0.0;
  double phase = 0.0;
  double center_theta0 = 0.0;

  double background_stderr = 0.0;
  double contrast_stderr = 0.0;
  double envelope_stderr = 0.0;
  double period_stderr = 0.0;
  double phase_stderr = 0.0;
  double center_stderr = 0.0;

  double inferred_h = 0.0;        // pi / (k theta0 Theta_f), NaN if degenerate
  double inferred_sigma_z = 0.0;  // 1 / (theta0 k Phi)
  double residual_rms = 0.0;      // rms model - data, relative to the background
  bool converged = false;
  bool degenerate = false;  // fringe period not shorter than the envelope width
  bool used_raw_contrast = false;
  int iterations = 0;
  std::string message;
};

namespace detail {

enum FitParam { kB = 0, kA, kPhi, kPeriod, kPhase, kCenter, kNumParams };
using ParamVec = Eigen::Matrix<double, kNumParams, 1>;

struct FringeModel {
  std::span<const double> theta;
  AngleCoordinate coord;

  double value(const ParamVec& p, std::size_t i) const {
    const double xi = reduced_angle(theta[i], p[kCenter], coord);
    const double env = std::exp(-2.0 * xi * xi / (p[kPhi] * p[kPhi]));
    return p[kB] * (1.0 + p[kA] * env * std::cos(two_pi * xi / p[kPeriod] + p[kPhase]));
  }

  void gradient(const ParamVec& p, std::size_t i, double* g) const {
    const double xi = reduced_angle(theta[i], p[kCenter], coord);
    const double phi2 = p[kPhi] * p[kPhi];
    const double env = std::exp(-2.0 * xi * xi / phi2);
    const double psi = two_pi * xi / p[kPeriod] + p[kPhase];
    const double c = std::cos(psi), s = std::sin(psi);
    const double ba = p[kB] * p[kA];
    g[kB] = 1.0 + p[kA] * env * c;
    g[kA] = p[kB] * env * c;
    g[kPhi] = ba * env * c * 4.0 * xi * xi / (phi2 * p[kPhi]);
    g[kPeriod] = ba * env * s * two_pi * xi / (p[kPeriod] * p[kPeriod]);
    g[kPhase] = -ba * env * s;
    const double dxi = reduced_angle_dcenter(theta[i], p[kCenter], coord);
    g[kCenter] = ba * (env * (-4.0 * xi / phi2) * c - env * s * two_pi / p[kPeriod]) * dxi;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

/// Per-point least-squares weights from the pattern's standard errors, floored at a tenth of
/// their median so single near-zero errors cannot dominate.
inline std::vector<double> fit_weights(const AngularPattern& p) {
  std::vector<double> w(p.size(), 1.0);
  if (p.std_error.size() != p.size()) return w;
  const double floor = 0.1 * median(p.std_error);
  if (!(floor > 0.0)) return w;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / (p.std_error[i] * p.std_error[i] + floor * floor);
  return w;
}

/// Trapezoid-rule interval weights for a possibly non-uniform abscissa.
inline std::vector<double> interval_weights(const std::vector<double>& x) {
  std::vector<double> d(x.size(), 0.0);
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double h = 0.5 * std::abs(x[i + 1] - x[i]);
    d[i] += h;
    d[i + 1] += h;
  }
  return d;
}

}  // namespace detail

/// Mean intensity outside the fringe region: |xi| > 2 Phi if a hint is given, otherwise the
/// outer fifth of the points by |xi|.
inline double estimate_background(const AngularPattern& p, double center, std::optional<double> phi,
                                  AngleCoordinate coord) {
  std::vector<std::pair<double, double>> by_dist;
  for (std::size_t i = 0; i < p.size(); ++i)
    by_dist.emplace_back(std::abs(reduced_angle(p.grid.angles[i], center, coord)), p.intensity[i]);
  if (phi) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [d, v] : by_dist)
      if (d > 2.0 * *phi) {
        sum += v;
        ++n;
      }
    if (n >= 5) return sum / static_cast<double>(n);
  }
  std::sort(by_dist.begin(), by_dist.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const std::size_t n = std::max<std::size_t>(1, by_dist.size() / 5);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += by_dist[i].second;
  return sum / static_cast<double>(n);
}

/// Contrast from sampled extrema: (I(centre) - I_min) / I_background with I_min the average over both
/// sides of the minimum inside the first trough window |xi| in [Theta_f/4, 3 Theta_f/4].
inline double raw_contrast(const AngularPattern& p, double center, double period, double phi,
                           AngleCoordinate coord = AngleCoordinate::cosine_exact) {
  const double bg = estimate_background(p, center, phi, coord);
  if (!(bg != 0.0)) throw NoFringeSignal();
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  double lo = std::numeric_limits<double>::infinity(), hi = lo;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double xi = reduced_angle(p.grid.angles[i], center, coord);
    if (std::abs(xi) < best_d) {
      best_d = std::abs(xi);
      best = i;
    }
    const double d = std::abs(xi);
    if (d >= 0.25 * period && d <= 0.75 * period) {
      if (xi < 0) lo = std::min(lo, p.intensity[i]);
      else hi = std::min(hi, p.intensity[i]);
    }
  }
  double imin;
  if (std::isfinite(lo) && std::isfinite(hi)) imin = 0.5 * (lo + hi);
  else if (std::isfinite(lo)) imin = lo;
  else if (std::isfinite(hi)) imin = hi;
  else throw std::invalid_argument("raw_contrast: grid does not reach the first trough");
  return (p.intensity[best] - imin) / bg;
}

/// Weighted Levenberg-Marquardt fit of the fringe model with analytic Jacobian.
/// Initial guesses: background from the outer region, period from the strongest non-zero
/// frequency of the background-normalised signal, envelope from the second moment of the
/// rectified signal, amplitude and phase from a linear projection.
inline FringeFitResult fit_fringes(const AngularPattern& pattern, const FitHints& hints = {}) {
  using namespace detail;
  pattern.grid.validate();
  const std::size_t n = pattern.size();
  if (n != pattern.grid.size()) throw std::invalid_argument("fit_fringes: intensity and grid differ in length");
  if (n < 8) throw std::invalid_argument("fit_fringes: need at least 8 points");
  const auto& theta = pattern.grid.angles;
  const auto& y = pattern.intensity;
  const AngleCoordinate coord = hints.coordinate;

  {
    const auto [mn, mx] = std::minmax_element(y.begin(), y.end());
    const double scale = std::max(std::abs(*mn), std::abs(*mx));
    if (!(scale > 0.0) || (*mx - *mn) <= 1e-12 * scale) throw NoFringeSignal();
  }

  const double center0 = hints.theta0;
  std::vector<double> xi(n);
  for (std::size_t i = 0; i < n; ++i) xi[i] = reduced_angle(theta[i], center0, coord);
  const double span = std::abs(xi.back() - xi.front());
  const auto dxi = interval_weights(xi);

  ParamVec p;
  p[kB] = estimate_background(pattern, center0, hints.envelope_hint, coord);
  if (!(std::abs(p[kB]) > 0.0)) throw NoFringeSignal();
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = y[i] / p[kB] - 1.0;

  // Strongest frequency of the normalised signal, 8x oversampled, then parabolic refinement.
  double min_step = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < n; ++i) min_step = std::min(min_step, std::abs(xi[i + 1] - xi[i]));
  const double f_lo = 1.5 / span, f_hi = 0.5 / min_step, df = 1.0 / (8.0 * span);
  std::vector<double> freqs, power;
  for (double f = f_lo; f <= f_hi; f += df) {
    cplx acc{};
    for (std::size_t i = 0; i < n; ++i) acc += r[i] * dxi[i] * std::polar(1.0, -two_pi * f * xi[i]);
    freqs.push_back(f);
    power.push_back(std::norm(acc));
  }
  if (freqs.empty()) throw NoFringeSignal();
  const std::size_t kmax = static_cast<std::size_t>(std::max_element(power.begin(), power.end()) - power.begin());
  double f_peak = freqs[kmax];
  if (kmax > 0 && kmax + 1 < freqs.size()) {
    const double a = power[kmax - 1], b = power[kmax], c = power[kmax + 1];
    const double den = a - 2.0 * b + c;
    if (den < 0.0) f_peak += 0.5 * df * (a - c) / den;
  }
  p[kPeriod] = 1.0 / f_peak;

  {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num += std::abs(r[i]) * xi[i] * xi[i] * dxi[i];
      den += std::abs(r[i]) * dxi[i];
    }
    double phi0 = den > 0.0 ? 2.0 * std::sqrt(num / den) : span / 4.0;
    if (hints.envelope_hint && !(phi0 > 0.25 * *hints.envelope_hint && phi0 < 4.0 * *hints.envelope_hint))
      phi0 = *hints.envelope_hint;
    p[kPhi] = std::clamp(phi0, 0.5 * p[kPeriod], span);
  }

  {
    // r ~ env (u cos - v sin) -> a = hypot(u, v), phase = atan2(v, u)
    Eigen::Matrix2d m = Eigen::Matrix2d::Zero();
    Eigen::Vector2d rhs = Eigen::Vector2d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const double env = std::exp(-2.0 * xi[i] * xi[i] / (p[kPhi] * p[kPhi]));
      const double arg = two_pi * xi[i] / p[kPeriod];
      const Eigen::Vector2d b(env * std::cos(arg), -env * std::sin(arg));
      m += b * b.transpose();
      rhs += b * r[i];
    }
    const Eigen::Vector2d uv = m.ldlt().solve(rhs);
    p[kA] = std::hypot(uv[0], uv[1]);
    p[kPhase] = std::atan2(uv[1], uv[0]);
    if (!std::isfinite(p[kA]) || p[kA] == 0.0) {
      p[kA] = 0.5;
      p[kPhase] = 0.0;
    }
  }
  p[kCenter] = center0;

  const auto w = fit_weights(pattern);
  const FringeModel model{theta, coord};
  auto cost_of = [&](const ParamVec& q) {
    if (!(q[kPhi] > 0.0) || !(q[kPeriod] > 0.0)) return std::numeric_limits<double>::infinity();
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = model.value(q, i) - y[i];
      c += w[i] * d * d;
    }
    return std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
  };

  FringeFitResult res;
  double cost = cost_of(p);
  double lambda = 1e-3;
  Eigen::Matrix<double, kNumParams, kNumParams> jtj;
  ParamVec jtr;
  auto build_normal = [&](const ParamVec& q) {
    jtj.setZero();
    jtr.setZero();
    std::array<double, kNumParams> g;
    for (std::size_t i = 0; i < n; ++i) {
      model.gradient(q, i, g.data());
      const Eigen::Map<const ParamVec> gv(g.data());
      const double d = model.value(q, i) - y[i];
      jtj.noalias() += w[i] * gv * gv.transpose();
      jtr.noalias() += w[i] * d * gv;
    }
  };

  bool converged = false;
  int it = 0;
  for (; it < hints.max_iterations && !converged; ++it) {
    build_normal(p);
    bool accepted = false;
    while (!accepted) {
      Eigen::Matrix<double, kNumParams, kNumParams> a = jtj;
      for (int d = 0; d < kNumParams; ++d) a(d, d) += lambda * std::max(jtj(d, d), 1e-300);
      const ParamVec step = a.ldlt().solve(-jtr);
      const ParamVec trial = p + step;
      const double trial_cost = step.allFinite() ? cost_of(trial) : std::numeric_limits<double>::infinity();
      if (trial_cost <= cost) {
        const std::array<double, kNumParams> scale{std::abs(p[kB]), std::max(std::abs(p[kA]), 1e-3), p[kPhi],
                                                   p[kPeriod], 1.0, p[kPeriod]};
        double rel = 0.0;
        for (int d = 0; d < kNumParams; ++d) rel = std::max(rel, std::abs(step[d]) / scale[d]);
        const double drop = cost - trial_cost;
        p = trial;
        cost = trial_cost;
        lambda = std::max(lambda * 0.1, 1e-12);
        accepted = true;
        if (rel < hints.tolerance || drop <= 1e-15 * cost) converged = true;
      } else {
        lambda *= 10.0;
        if (lambda > 1e16) break;
      }
    }
    if (!accepted) {
      // No downhill step left: the current point is a numerical minimum.
      converged = std::isfinite(cost);
      break;
    }
  }

  // Canonical sign: phase in (-pi/2, pi/2], amplitude carries the sign.
  double phase = std::remainder(p[kPhase], two_pi);
  if (phase > pi / 2) {
    phase -= pi;
    p[kA] = -p[kA];
  } else if (phase <= -pi / 2) {
    phase += pi;
    p[kA] = -p[kA];
  }
  p[kPhase] = phase;

  res.background = p[kB];
  res.contrast = 2.0 * p[kA];
  res.envelope_phi = p[kPhi];
  res.period_theta_f = p[kPeriod];
  res.phase = p[kPhase];
  res.center_theta0 = p[kCenter];
  res.iterations = it;
  res.converged = converged;

  build_normal(p);
  const double dof = static_cast<double>(n) - static_cast<double>(kNumParams);
  const double red_chi2 = dof > 0 ? cost / dof : 0.0;
  Eigen::FullPivLU<Eigen::Matrix<double, kNumParams, kNumParams>> lu(jtj);
  if (lu.isInvertible()) {
    const Eigen::Matrix<double, kNumParams, kNumParams> cov = lu.inverse() * red_chi2;
    auto se = [&](int d) { return std::sqrt(std::max(cov(d, d), 0.0)); };
    res.background_stderr = se(kB);
    res.contrast_stderr = 2.0 * se(kA);
    res.envelope_stderr = se(kPhi);
    res.period_stderr = se(kPeriod);
    res.phase_stderr = se(kPhase);
    res.center_stderr = se(kCenter);
  }

  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = model.value(p, i) - y[i];
    ss += d * d;
  }
  res.residual_rms = std::sqrt(ss / static_cast<double>(n)) / std::abs(res.background);

  res.degenerate = !(res.period_theta_f < 2.0 * res.envelope_phi);
  const double k = hints.wavenumber;
  res.inferred_sigma_z = cloud_size_from_envelope(res.envelope_phi, res.center_theta0, k);
  if (res.degenerate) {
    res.inferred_h = std::numeric_limits<double>::quiet_NaN();
    res.message = "fringe period exceeds envelope width (mirror at the cloud centre?)";
  } else {
    res.inferred_h = mirror_distance_from_period(res.period_theta_f, res.center_theta0, k);
  }

  if (!res.converged) {
    res.message = "fit did not converge within " + std::to_string(hints.max_iterations) + " iterations";
    try {
      const double phi = hints.envelope_hint.value_or(res.envelope_phi);
      res.contrast = raw_contrast(pattern, hints.theta0, res.period_theta_f, phi, coord);
      res.used_raw_contrast = true;
    } catch (const std::exception&) {
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Mirror scan and misalignment
// ---------------------------------------------------------------------------

struct ScanSetup {
  double sigma_z = 0.9e-3;
  std::size_t atom_count = 1'000'000;
  std::size_t realizations = 20;
  std::uint64_t seed = 0;
  double s = 0.01;
  double theta0 = 1.0 * units::deg;
  TransitionSpec transition;
  double misalignment_x0 = 0.0;  // added to every nominal h before simulating
  std::size_t grid_points = 2001;
  PatternModel model = PatternModel::total;
  RadiationOptions options;
};

struct ScanRow {
  double h_nominal = 0.0;
  double h_true = 0.0;
  FringeFitResult fit;
  bool valid = false;  // converged and non-degenerate
  std::string error;
};

inline FringeFitResult simulate_and_fit(const ScanSetup& setup, double h_true, unsigned threads = 0) {
  const double k = setup.transition.wavenumber();
  SimulationRequest req;
  req.cloud = {setup.sigma_z, h_true, setup.atom_count};
  const double phi = envelope_half_width(setup.theta0, k, setup.sigma_z);
  std::size_t points = setup.grid_points;
  if (h_true != 0.0) {
    // keep >= 24 samples per fringe
    const double fringes = 6.0 * phi / fringe_period(setup.theta0, k, h_true);
    points = std::max(points, static_cast<std::size_t>(std::ceil(24.0 * fringes)) + 1);
  }
  req.grid = make_grid(setup.theta0, 3.0 * phi, points);
  req.model = setup.model;
  req.s = setup.s;
  req.theta0 = setup.theta0;
  req.transition = setup.transition;
  req.seed = setup.seed;
  req.realizations = setup.realizations;
  req.options = setup.options;
  const auto pattern = simulate_average(req, threads);
  FitHints hints;
  hints.theta0 = setup.theta0;
  hints.wavenumber = k;
  hints.envelope_hint = phi;
  return fit_fringes(pattern, hints);
}

/// simulate -> average -> fit for every nominal mirror distance.
inline std::vector<ScanRow> mirror_scan(std::span<const double> h_values, const ScanSetup& setup,
                                        unsigned threads = 0) {
  std::vector<ScanRow> rows;
  for (double h : h_values) {
    ScanRow row;
    row.h_nominal = h;
    row.h_true = h + setup.misalignment_x0;
    try {
      row.fit = simulate_and_fit(setup, row.h_true, threads);
      row.valid = row.fit.converged && !row.fit.degenerate;
      if (!row.valid) row.error = row.fit.message;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(row);
  }
  return rows;
}

struct MisalignmentFit {
  double slope_a = 0.0;
  double offset_x0 = 0.0;
  double slope_stderr = 0.0;
  double offset_stderr = 0.0;
  double residual_rms = 0.0;
  bool bracketed = false;
  std::vector<std::string> warnings;
};

/// Least squares of inferred = |A h + x0|. For each split of the sorted h values into a falling
/// and a rising branch the problem is linear; the best consistent split wins. A is reported >= 0.
/// Optional per-point uncertainties weight the points; the scale comes from the residuals either way.
inline MisalignmentFit misalignment_fit(std::span<const double> h_nominal, std::span<const double> inferred,
                                        std::span<const double> sigma = {}) {
  if (h_nominal.size() != inferred.size()) throw std::invalid_argument("misalignment_fit: length mismatch");
  if (!sigma.empty() && sigma.size() != inferred.size())
    throw std::invalid_argument("misalignment_fit: sigma length mismatch");
  for (double v : sigma)
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("misalignment_fit: sigma must be > 0");
  const std::size_t n = h_nominal.size();
  auto wt = [&](std::size_t j) { return sigma.empty() ? 1.0 : 1.0 / sigma[j]; };
  if (n < 3) throw std::invalid_argument("misalignment_fit: need at least 3 points");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return h_nominal[a] < h_nominal[b]; });

  struct Candidate {
    double a, x0, sse;
    Eigen::Matrix2d cov_unscaled;
    bool consistent;
  };
  std::optional<Candidate> best;
  for (std::size_t split = 0; split <= n; ++split) {
    // points [0, split) lie on the falling branch: inferred = -(A h + x0)
    Eigen::MatrixXd m(n, 2);
    Eigen::VectorXd rhs(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = order[i];
      const double sgn = i < split ? -1.0 : 1.0;
      m(static_cast<Eigen::Index>(i), 0) = wt(j) * h_nominal[j];
      m(static_cast<Eigen::Index>(i), 1) = wt(j);
      rhs[static_cast<Eigen::Index>(i)] = wt(j) * sgn * inferred[j];
    }
    const Eigen::Matrix2d mtm = m.transpose() * m;
    if (std::abs(mtm.determinant()) <= 1e-300) continue;
    const Eigen::Vector2d sol = mtm.ldlt().solve(m.transpose() * rhs);
    double sse = 0.0;
    bool consistent = true;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = order[i];
      const double lin = sol[0] * h_nominal[j] + sol[1];
      const double d = wt(j) * (std::abs(lin) - inferred[j]);
      sse += d * d;
      if ((i < split && lin > 0.0) || (i >= split && lin < 0.0)) consistent = false;
    }
    Candidate c{sol[0], sol[1], sse, mtm.inverse(), consistent};
    if (!best || (c.consistent && !best->consistent) || (c.consistent == best->consistent && c.sse < best->sse))
      best = c;
  }
  if (!best) throw std::invalid_argument("misalignment_fit: degenerate h values");

  MisalignmentFit out;
  out.slope_a = best->a;
  out.offset_x0 = best->x0;
  if (out.slope_a < 0.0) {
    out.slope_a = -out.slope_a;
    out.offset_x0 = -out.offset_x0;
  }
  const double dof = static_cast<double>(n) - 2.0;
  const double sigma2 = dof > 0 ? best->sse / dof : 0.0;
  out.slope_stderr = std::sqrt(std::max(0.0, best->cov_unscaled(0, 0) * sigma2));
  out.offset_stderr = std::sqrt(std::max(0.0, best->cov_unscaled(1, 1) * sigma2));
  double raw = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = std::abs(out.slope_a * h_nominal[j] + out.offset_x0) - inferred[j];
    raw += d * d;
  }
  out.residual_rms = std::sqrt(raw / static_cast<double>(n));
  std::size_t below = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (out.slope_a * h_nominal[i] + out.offset_x0 < 0.0) ++below;
  out.bracketed = below > 0 && below < n;
  if (!out.bracketed) out.warnings.emplace_back("minimum not bracketed");
  if (n < 4) out.warnings.emplace_back("fewer than 4 points");
  return out;
}

/// Valid rows only, weighted by the period uncertainty propagated to h.
inline MisalignmentFit misalignment_fit(std::span<const ScanRow> rows) {
  std::vector<double> h, inferred, sigma;
  bool weighted = true;
  for (const auto& r : rows)
    if (r.valid) {
      h.push_back(r.h_nominal);
      inferred.push_back(r.fit.inferred_h);
      const double se = r.fit.inferred_h * r.fit.period_stderr / r.fit.period_theta_f;
      sigma.push_back(se);
      weighted = weighted && se > 0.0 && std::isfinite(se);
    }
  if (!weighted) sigma.clear();
  return misalignment_fit(h, inferred, sigma);
}

// ---------------------------------------------------------------------------
// Contrast versus saturation
// ---------------------------------------------------------------------------

struct CurveSetup {
  double h = 8.0e-3;
  double sigma_z = 0.9e-3;
  std::size_t atom_count = 1'000'000;
  std::size_t realizations = 20;
  std::uint64_t seed = 0;
  double theta0 = 1.0 * units::deg;
  TransitionSpec transition;
  std::size_t grid_points = 2001;
  RadiationOptions options;
};

struct ContrastCurve {
  std::vector<double> s_values;
  std::vector<double> contrast_values;
  std::vector<double> uncertainty;
  std::vector<bool> converged;
  PatternModel model = PatternModel::total;
};

/// One disorder-averaged pattern per s on shared realizations, each fitted for its contrast.
inline ContrastCurve contrast_vs_saturation(std::span<const double> s_values, const CurveSetup& setup,
                                            PatternModel model, unsigned threads = 0) {
  if (model != PatternModel::total && model != PatternModel::elastic)
    throw std::invalid_argument("contrast_vs_saturation: model must be total or elastic");
  if (s_values.empty()) throw std::invalid_argument("contrast_vs_saturation: no s values");
  for (std::size_t i = 1; i < s_values.size(); ++i)
    if (!(s_values[i] > s_values[i - 1])) throw std::invalid_argument("s values must be strictly increasing");

  const double k = setup.transition.wavenumber();
  const double phi = envelope_half_width(setup.theta0, k, setup.sigma_z);
  SimulationRequest req;
  req.cloud = {setup.sigma_z, setup.h, setup.atom_count};
  req.grid = make_grid(setup.theta0, 3.0 * phi, setup.grid_points);
  req.theta0 = setup.theta0;
  req.transition = setup.transition;
  req.seed = setup.seed;
  req.realizations = setup.realizations;
  req.options = setup.options;
  const std::vector<PatternModel> models(s_values.size(), model);
  const auto patterns = simulate_models(req, models, s_values, threads);

  ContrastCurve curve;
  curve.model = model;
  curve.s_values.assign(s_values.begin(), s_values.end());
  FitHints hints;
  hints.theta0 = setup.theta0;
  hints.wavenumber = k;
  hints.envelope_hint = phi;
  for (const auto& p : patterns) {
    try {
      const auto fit = fit_fringes(p, hints);
      curve.contrast_values.push_back(fit.contrast);
      curve.uncertainty.push_back(fit.contrast_stderr);
      curve.converged.push_back(fit.converged);
    } catch (const std::exception&) {
      curve.contrast_values.push_back(std::numeric_limits<double>::quiet_NaN());
      curve.uncertainty.push_back(std::numeric_limits<double>::quiet_NaN());
      curve.converged.push_back(false);
    }
  }
  return curve;
}

/// Pointwise min/max over curves run at the corner values h +- dh, sigma_z +- dsigma.
struct ContrastBand {
  std::vector<double> s_values, lower, upper;
};

inline ContrastBand contrast_band(std::span<const double> s_values, const CurveSetup& base, PatternModel model,
                                  double dh, double dsigma, unsigned threads = 0) {
  ContrastBand band;
  band.s_values.assign(s_values.begin(), s_values.end());
  band.lower.assign(s_values.size(), std::numeric_limits<double>::infinity());
  band.upper.assign(s_values.size(), -std::numeric_limits<double>::infinity());
  for (double sh : {-1.0, 1.0})
    for (double ss : {-1.0, 1.0}) {
      CurveSetup c = base;
      c.h = base.h + sh * dh;
      c.sigma_z = base.sigma_z + ss * dsigma;
      const auto curve = contrast_vs_saturation(s_values, c, model, threads);
      for (std::size_t i = 0; i < s_values.size(); ++i) {
        band.lower[i] = std::min(band.lower[i], curve.contrast_values[i]);
        band.upper[i] = std::max(band.upper[i], curve.contrast_values[i]);
      }
    }
  return band;
}

}  // namespace mcbs
