#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mcbs/radiation.hpp"
#include "mcbs/rng.hpp"

namespace mcbs::ccd {

/// Detector image in the focal plane: pixel (r, c) sits at polar angle
/// hypot(r - center_row, c - center_col) * pixel_scale from the mirror normal.
struct Frame {
  std::size_t rows = 0, cols = 0;
  std::vector<double> pixels;  // row-major counts
  double pixel_scale = 1e-4;   // rad / px
  double center_row = 0.0, center_col = 0.0;

  double& at(std::size_t r, std::size_t c) { return pixels[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return pixels[r * cols + c]; }
  double radius_px(std::size_t r, std::size_t c) const {
    return std::hypot(static_cast<double>(r) - center_row, static_cast<double>(c) - center_col);
  }

  void validate() const {
    if (rows < 64 || cols < 64) throw std::invalid_argument("frame must be at least 64x64");
    if (pixels.size() != rows * cols) throw std::invalid_argument("frame pixel count does not match dimensions");
    if (!(pixel_scale > 0.0)) throw std::invalid_argument("frame pixel_scale must be > 0");
    for (double v : pixels)
      if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("frame counts must be finite and >= 0");
  }
};

struct FrameGeometry {
  std::size_t rows = 640, cols = 640;
  double pixel_scale = 1e-4;
  double center_row = 320.0, center_col = 320.0;
};

inline Frame blank_frame(const FrameGeometry& g) {
  if (g.center_row < 0 || g.center_col < 0 || g.center_row >= static_cast<double>(g.rows) ||
      g.center_col >= static_cast<double>(g.cols))
    throw std::invalid_argument("frame centre must lie inside the frame");
  return Frame{g.rows, g.cols, std::vector<double>(g.rows * g.cols, 0.0), g.pixel_scale, g.center_row, g.center_col};
}

/// Laser light reaching the camera without atoms: a broad Gaussian around the reflected-beam
/// direction (polar angle theta0, azimuth `azimuth`) plus a narrow peak shifted radially by `peak_offset`.
struct StrayModel {
  double theta0 = 1.0 * units::deg;
  double azimuth = 0.0;
  double broad_amplitude = 1.0e4;  // counts
  double broad_width = 8e-3;       // rad (Gaussian sigma)
  double peak_amplitude = 3.0e4;
  double peak_width = 1.5e-3;
  double peak_offset = 2.0e-3;

  double value(double theta_x, double theta_y) const {
    const double bx = theta0 * std::cos(azimuth), by = theta0 * std::sin(azimuth);
    const double px = (theta0 + peak_offset) * std::cos(azimuth), py = (theta0 + peak_offset) * std::sin(azimuth);
    const double db2 = (theta_x - bx) * (theta_x - bx) + (theta_y - by) * (theta_y - by);
    const double dp2 = (theta_x - px) * (theta_x - px) + (theta_y - py) * (theta_y - py);
    return broad_amplitude * std::exp(-0.5 * db2 / (broad_width * broad_width)) +
           peak_amplitude * std::exp(-0.5 * dp2 / (peak_width * peak_width));
  }
};

struct NoiseModel {
  double level = 0.0;  // Gaussian read-noise sigma as a fraction of `reference` counts
  double reference = 0.0;
  bool shot_noise = false;  // Poisson statistics approximated as Gaussian with variance = counts
  std::uint64_t seed = 0;
};

struct SynthesisParams {
  double transmission = 1.0;          // T_true in (0, 1]
  double counts_per_unit = 1.0e5;     // counts per I0 of the pattern
  double isotropic_background = 0.0;  // extra flat fluorescence [counts]
  NoiseModel noise;
};

/// Linear interpolation of a pattern at theta, clamped to the edge values outside the grid.
inline double sample_pattern(const AngularPattern& p, double theta) {
  const auto& a = p.grid.angles;
  if (theta <= a.front()) return p.intensity.front();
  if (theta >= a.back()) return p.intensity.back();
  const std::size_t hi = static_cast<std::size_t>(std::upper_bound(a.begin(), a.end(), theta) - a.begin());
  const std::size_t lo = hi - 1;
  const double t = (theta - a[lo]) / (a[hi] - a[lo]);
  return (1.0 - t) * p.intensity[lo] + t * p.intensity[hi];
}

/// Circularly symmetric fluorescence counts (pattern + isotropic background) at polar angle theta.
inline double fluorescence_counts(const AngularPattern& p, const SynthesisParams& sp, double theta) {
  return sp.counts_per_unit * sample_pattern(p, theta) + sp.isotropic_background;
}

namespace detail {
inline void add_noise(Frame& f, const NoiseModel& noise, std::uint32_t stream) {
  if (noise.level <= 0.0 && !noise.shot_noise) return;
  const rng::CounterStream gen(noise.seed, stream, 0);
  const double sigma_read = noise.level * noise.reference;
  for (std::size_t i = 0; i < f.pixels.size(); ++i) {
    const auto [g0, g1] = gen.normal_pair(i);
    double v = f.pixels[i] + sigma_read * g0;
    if (noise.shot_noise) v += std::sqrt(std::max(f.pixels[i], 0.0)) * g1;
    f.pixels[i] = std::max(v, 0.0);
  }
}
}  // namespace detail

struct FramePair {
  Frame with_atoms;
  Frame without_atoms;
};

/// without = stray + noise; with = T stray + fluorescence rendering + independent noise.
inline FramePair synthesize_frames(const AngularPattern& pattern, const StrayModel& stray, const SynthesisParams& sp,
                                   const FrameGeometry& geom) {
  if (!(sp.transmission > 0.0 && sp.transmission <= 1.0))
    throw std::invalid_argument("synthesize_frames: transmission must be in (0, 1]");
  FramePair out{blank_frame(geom), blank_frame(geom)};
  for (std::size_t r = 0; r < geom.rows; ++r)
    for (std::size_t c = 0; c < geom.cols; ++c) {
      const double ty = (static_cast<double>(r) - geom.center_row) * geom.pixel_scale;
      const double tx = (static_cast<double>(c) - geom.center_col) * geom.pixel_scale;
      const double laser = stray.value(tx, ty);
      const double theta = std::hypot(tx, ty);
      out.without_atoms.at(r, c) = laser;
      out.with_atoms.at(r, c) = sp.transmission * laser + fluorescence_counts(pattern, sp, theta);
    }
  detail::add_noise(out.without_atoms, sp.noise, 2);
  detail::add_noise(out.with_atoms, sp.noise, 3);
  return out;
}

enum class ProfileKind { with_atoms, without_atoms, fluorescence_only };

inline std::string_view to_string(ProfileKind k) {
  switch (k) {
    case ProfileKind::with_atoms: return "with_atoms";
    case ProfileKind::without_atoms: return "without_atoms";
    case ProfileKind::fluorescence_only: return "fluorescence_only";
  }
  return "unknown";
}

/// Azimuthal average: one entry per annulus [i, i+1) px. Invalid annuli (no unmasked pixel)
/// keep theta at the annulus centre and are ignored downstream.
struct ReducedProfile {
  std::vector<double> theta;
  std::vector<double> intensity;
  std::vector<double> std_error;
  std::vector<std::size_t> pixel_count;
  std::vector<bool> valid;
  ProfileKind kind = ProfileKind::with_atoms;

  std::size_t size() const { return theta.size(); }
};

/// Mask: empty = use every pixel; otherwise nonzero entries are excluded.
inline ReducedProfile reduce_azimuthal(const Frame& f, std::span<const std::uint8_t> mask = {},
                                       ProfileKind kind = ProfileKind::with_atoms) {
  if (f.pixels.size() != f.rows * f.cols) throw std::invalid_argument("reduce_azimuthal: malformed frame");
  if (!mask.empty() && mask.size() != f.pixels.size()) throw std::invalid_argument("reduce_azimuthal: mask size");
  if (f.center_row < 0 || f.center_col < 0 || f.center_row >= static_cast<double>(f.rows) ||
      f.center_col >= static_cast<double>(f.cols))
    throw std::invalid_argument("reduce_azimuthal: centre outside frame");
  double rmax = 0.0;
  for (double r : {0.0, static_cast<double>(f.rows - 1)})
    for (double c : {0.0, static_cast<double>(f.cols - 1)})
      rmax = std::max(rmax, std::hypot(r - f.center_row, c - f.center_col));
  const std::size_t bins = static_cast<std::size_t>(rmax) + 1;
  std::vector<double> sum(bins, 0.0), sum2(bins, 0.0), rsum(bins, 0.0);
  std::vector<std::size_t> cnt(bins, 0);
  for (std::size_t r = 0; r < f.rows; ++r)
    for (std::size_t c = 0; c < f.cols; ++c) {
      const std::size_t idx = r * f.cols + c;
      if (!mask.empty() && mask[idx]) continue;
      const double rad = f.radius_px(r, c);
      const std::size_t b = static_cast<std::size_t>(rad);
      const double v = f.pixels[idx];
      sum[b] += v;
      sum2[b] += v * v;
      rsum[b] += rad;
      ++cnt[b];
    }
  ReducedProfile p;
  p.kind = kind;
  for (std::size_t b = 0; b < bins; ++b) {
    const bool ok = cnt[b] > 0;
    const double n = static_cast<double>(cnt[b]);
    p.valid.push_back(ok);
    p.pixel_count.push_back(cnt[b]);
    p.theta.push_back((ok ? rsum[b] / n : static_cast<double>(b) + 0.5) * f.pixel_scale);
    const double mean = ok ? sum[b] / n : 0.0;
    p.intensity.push_back(mean);
    const double var = cnt[b] > 1 ? std::max(0.0, (sum2[b] - n * mean * mean) / (n - 1.0)) : 0.0;
    p.std_error.push_back(cnt[b] > 1 ? std::sqrt(var / n) : 0.0);
  }
  return p;
}

class DegenerateSubtraction : public std::runtime_error {
 public:
  DegenerateSubtraction()
      : std::runtime_error("degenerate stray-light subtraction: laser profile is flat outside the fringe window") {}
};

struct SubtractionResult {
  double transmission_T = 0.0;
  double background_I_fluo = 0.0;
  double transmission_stderr = 0.0;
  double background_stderr = 0.0;
  ReducedProfile fluorescence_profile;
  double fit_residual = 0.0;  // rms over the fit region [counts]
  std::size_t fit_points = 0;
};

/// Least squares of I_a = T I_las + I_fluo over valid annuli with |theta - theta0| > 2 Phi, then
/// I_f = I_a - T I_las over the whole profile.
inline SubtractionResult extract_fluorescence(const ReducedProfile& with_atoms, const ReducedProfile& without_atoms,
                                              double theta0, double phi) {
  const std::size_t n = with_atoms.size();
  if (without_atoms.size() != n) throw std::invalid_argument("extract_fluorescence: profiles differ in length");
  for (std::size_t i = 0; i < n; ++i)
    if (std::abs(with_atoms.theta[i] - without_atoms.theta[i]) > 1e-12 * std::max(1.0, std::abs(with_atoms.theta[i])))
      throw std::invalid_argument("extract_fluorescence: profiles are on different theta grids");

  double sl = 0.0, sll = 0.0, sa = 0.0, sla = 0.0;
  std::size_t m = 0;
  auto in_region = [&](std::size_t i) {
    return with_atoms.valid[i] && without_atoms.valid[i] && std::abs(with_atoms.theta[i] - theta0) > 2.0 * phi;
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_region(i)) continue;
    const double l = without_atoms.intensity[i], a = with_atoms.intensity[i];
    sl += l;
    sll += l * l;
    sa += a;
    sla += l * a;
    ++m;
  }
  if (m < 3) throw std::invalid_argument("extract_fluorescence: fewer than 3 annuli outside the fringe window");
  const double mm = static_cast<double>(m);
  const double mean_l = sl / mm;
  const double var_l = sll / mm - mean_l * mean_l;
  if (!(var_l > 1e-10 * std::max(mean_l * mean_l, 1e-300))) throw DegenerateSubtraction();

  SubtractionResult res;
  const double cov_la = sla / mm - mean_l * (sa / mm);
  res.transmission_T = cov_la / var_l;
  res.background_I_fluo = sa / mm - res.transmission_T * mean_l;
  res.fit_points = m;

  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_region(i)) continue;
    const double d = with_atoms.intensity[i] - res.transmission_T * without_atoms.intensity[i] - res.background_I_fluo;
    ss += d * d;
  }
  res.fit_residual = std::sqrt(ss / mm);
  if (m > 2) {
    const double sigma2 = ss / (mm - 2.0);
    res.transmission_stderr = std::sqrt(sigma2 / (mm * var_l));
    res.background_stderr = std::sqrt(sigma2 * sll / (mm * mm * var_l));
  }

  ReducedProfile& f = res.fluorescence_profile;
  f.kind = ProfileKind::fluorescence_only;
  f.theta = with_atoms.theta;
  f.valid.resize(n);
  f.pixel_count = with_atoms.pixel_count;
  f.intensity.resize(n);
  f.std_error.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    f.valid[i] = with_atoms.valid[i] && without_atoms.valid[i];
    f.intensity[i] = with_atoms.intensity[i] - res.transmission_T * without_atoms.intensity[i];
    const double ea = with_atoms.std_error[i], el = res.transmission_T * without_atoms.std_error[i];
    f.std_error[i] = std::sqrt(ea * ea + el * el);
  }
  return res;
}

/// Valid entries of a profile restricted to [lo, hi], as an angular pattern for fitting.
inline AngularPattern profile_to_pattern(const ReducedProfile& p, double center, double lo, double hi) {
  AngularPattern out;
  out.grid.center = center;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!p.valid[i] || p.theta[i] < lo || p.theta[i] > hi) continue;
    out.grid.angles.push_back(p.theta[i]);
    out.intensity.push_back(p.intensity[i]);
    out.std_error.push_back(p.std_error[i]);
  }
  out.model = PatternModel::total;
  return out;
}

struct TransmissionRow {
  double s = 0.0;
  double transmission = 0.0;
  double fluorescence = 0.0;
};

/// Saturable Gaussian cloud (column optical depth b0 exp(-rho^2 / 2 R^2)) probed twice by a Gaussian
/// beam (on-axis saturation s, local s exp(-2 rho^2 / w^2)). Local absorption b / (1 + s_local).
/// transmission: beam-weighted exp(-2 b / (1 + s_local)).
/// fluorescence: absorbed beam power in units of (saturation intensity x pi w^2 / 2).
inline std::vector<TransmissionRow> transmission_background_model(std::span<const double> s_values, double b0,
                                                                  double beam_waist, double cloud_radius,
                                                                  std::size_t radial_points = 4001) {
  if (!(b0 > 0.0)) throw std::invalid_argument("transmission model: b0 must be > 0");
  if (!(beam_waist > 0.0) || !(cloud_radius > 0.0))
    throw std::invalid_argument("transmission model: waist and cloud radius must be > 0");
  if (radial_points % 2 == 0) ++radial_points;
  const double rho_max = 6.0 * std::max(beam_waist, cloud_radius);
  const double h = rho_max / static_cast<double>(radial_points - 1);
  auto simpson = [&](auto&& f) {
    double acc = 0.0;
    for (std::size_t i = 0; i < radial_points; ++i) {
      const double rho = h * static_cast<double>(i);
      const double wgt = (i == 0 || i + 1 == radial_points) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      acc += wgt * f(rho) * rho;
    }
    return acc * h / 3.0;
  };
  auto beam = [&](double rho) { return std::exp(-2.0 * rho * rho / (beam_waist * beam_waist)); };
  auto depth = [&](double rho) { return b0 * std::exp(-0.5 * rho * rho / (cloud_radius * cloud_radius)); };
  const double norm = simpson(beam);
  std::vector<TransmissionRow> rows;
  for (double s : s_values) {
    if (!(s >= 0.0)) throw std::invalid_argument("transmission model: s must be >= 0");
    auto trans = [&](double rho) { return std::exp(-2.0 * depth(rho) / (1.0 + s * beam(rho))); };
    const double t = simpson([&](double rho) { return beam(rho) * trans(rho); }) / norm;
    const double fl = simpson([&](double rho) { return s * beam(rho) * (1.0 - trans(rho)); }) / norm;
    rows.push_back({s, t, fl});
  }
  return rows;
}

}  // namespace mcbs::ccd
