#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>

namespace mcbs {

using cplx = std::complex<double>;

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

namespace units {
inline constexpr double nm = 1e-9;
inline constexpr double mm = 1e-3;
inline constexpr double mrad = 1e-3;
inline constexpr double deg = pi / 180.0;
// Linewidths are quoted as (2pi) x MHz, i.e. the MHz figure is a cyclic frequency.
inline constexpr double two_pi_MHz = two_pi * 1e6;
}  // namespace units

/// Two-level transition. Frequencies are angular [rad/s] throughout the library.
struct TransitionSpec {
  double wavelength = 461.0 * units::nm;
  double linewidth_gamma = 30.5 * units::two_pi_MHz;

  double wavenumber() const { return two_pi / wavelength; }

  void validate() const {
    if (!(wavelength > 0.0) || !std::isfinite(wavelength))
      throw std::invalid_argument("transition: wavelength must be > 0");
    if (!(linewidth_gamma > 0.0) || !std::isfinite(linewidth_gamma))
      throw std::invalid_argument("transition: linewidth must be > 0");
  }

  /// 88Sr 1S0 -> 1P1.
  static TransitionSpec strontium_blue() { return {}; }
};

struct DriveSpec {
  double rabi_peak = 0.0;        // Omega0 [rad/s]
  double detuning = 0.0;         // Delta [rad/s]
  double incidence_angle = 0.0;  // theta0 [rad]

  void validate() const {
    if (!(rabi_peak >= 0.0)) throw std::invalid_argument("drive: rabi_peak must be >= 0");
    if (!(std::abs(incidence_angle) < pi / 2))
      throw std::invalid_argument("drive: |incidence_angle| must be < pi/2");
  }
};

struct DipoleSteadyState {
  cplx coherence{};         // <sigma>_ss
  double population = 0.0;  // <sigma^dagger sigma>_ss
};

/// Delta^2 + Gamma^2/4.
inline double detuning_denominator(double detuning, const TransitionSpec& tr) {
  return detuning * detuning + 0.25 * tr.linewidth_gamma * tr.linewidth_gamma;
}

/// s = 2 Omega0^2 / (Delta^2 + Gamma^2/4)
inline double saturation_parameter(const DriveSpec& drive, const TransitionSpec& tr) {
  return 2.0 * drive.rabi_peak * drive.rabi_peak / detuning_denominator(drive.detuning, tr);
}

/// Inverse of saturation_parameter at fixed detuning.
inline double rabi_from_saturation(double s, double detuning, const TransitionSpec& tr) {
  if (s < 0.0) throw std::invalid_argument("saturation parameter must be >= 0");
  return std::sqrt(0.5 * s * detuning_denominator(detuning, tr));
}

/// Standing wave from the incident beam and its mirror image (mirror in z = 0, unit reflectivity):
/// Omega(r) = Omega0 cos(k z cos theta0) exp(-i k y sin theta0).
inline cplx local_rabi(double z, double y, const DriveSpec& drive, const TransitionSpec& tr) {
  const double k = tr.wavenumber();
  const double amp = drive.rabi_peak * std::cos(k * z * std::cos(drive.incidence_angle));
  return std::polar(1.0, -k * y * std::sin(drive.incidence_angle)) * amp;
}

/// Local saturation 2|Omega|^2/(Delta^2 + Gamma^2/4).
inline double local_saturation(cplx omega, double detuning, const TransitionSpec& tr) {
  return 2.0 * std::norm(omega) / detuning_denominator(detuning, tr);
}

/// Closed-form steady state of the semiclassical Bloch equations at local drive `omega`.
inline DipoleSteadyState steady_state(cplx omega, const DriveSpec& drive, const TransitionSpec& tr) {
  const double d0 = detuning_denominator(drive.detuning, tr);
  const double denom = d0 + 2.0 * std::norm(omega);
  const cplx lorentz = d0 / cplx(drive.detuning, 0.5 * tr.linewidth_gamma);
  return {lorentz * omega / denom, std::norm(omega) / denom};
}

/// Bloch state as expectation values; sigma_z = 2 * population - 1.
struct BlochState {
  cplx sigma{};
  double sigma_z = -1.0;
};

/// Time derivatives of the semiclassical Bloch equations:
///   d<sigma>/dt   = (i Delta - Gamma/2) <sigma> + i Omega <sigma_z>
///   d<sigma_z>/dt = 2i (Omega* <sigma> - Omega <sigma>*) - Gamma (<sigma_z> + 1)
inline BlochState bloch_rhs(const BlochState& st, cplx omega, double detuning, const TransitionSpec& tr) {
  const double gamma = tr.linewidth_gamma;
  const cplx i{0.0, 1.0};
  BlochState d;
  d.sigma = cplx(-0.5 * gamma, detuning) * st.sigma + i * omega * st.sigma_z;
  const cplx dz = 2.0 * i * (std::conj(omega) * st.sigma - omega * std::conj(st.sigma));
  d.sigma_z = dz.real() - gamma * (st.sigma_z + 1.0);
  return d;
}

inline BlochState to_bloch(const DipoleSteadyState& ss) { return {ss.coherence, 2.0 * ss.population - 1.0}; }

}  // namespace mcbs
