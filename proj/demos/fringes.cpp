// Simulates the backscattered pattern of a small cloud in front of a mirror and fits the fringes.
#include <fmt/format.h>

#include "mcbs/fringe.hpp"
#include "mcbs/radiation.hpp"

int main() {
  using namespace mcbs;
  const TransitionSpec tr = TransitionSpec::strontium_blue();
  const double theta0 = 1.0 * units::deg;
  const double k = tr.wavenumber();

  SimulationRequest req;
  req.cloud = {0.9 * units::mm, 8.0 * units::mm, 200'000};
  req.grid = default_grid(theta0, k, req.cloud.sigma_z, 801);
  req.theta0 = theta0;
  req.transition = tr;
  req.realizations = 10;
  req.seed = 7;

  const double expected_period = fringe_period(theta0, k, req.cloud.mirror_distance_h);
  const double expected_phi = envelope_half_width(theta0, k, req.cloud.sigma_z);
  fmt::print("expected: period {:.4f} mrad, envelope {:.4f} mrad\n", expected_period / units::mrad,
             expected_phi / units::mrad);

  for (double s : {0.01, 1.0, 20.0}) {
    req.s = s;
    const auto pattern = simulate_average(req);
    FitHints hints;
    hints.theta0 = theta0;
    hints.wavenumber = k;
    hints.envelope_hint = expected_phi;
    const auto fit = fit_fringes(pattern, hints);
    fmt::print("s = {:<5} C = {:.4f}  period {:.4f} mrad  h = {:.3f} mm  sigma_z = {:.3f} mm\n", s, fit.contrast,
               fit.period_theta_f / units::mrad, fit.inferred_h / units::mm, fit.inferred_sigma_z / units::mm);
  }
}
