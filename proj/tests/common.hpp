#pragma once

#include "mcbs/physics.hpp"
#include "mcbs/radiation.hpp"

namespace testing_geometry {

// lab setup: 461 nm line, 1 degree incidence, cloud 8 mm from the mirror
inline const mcbs::TransitionSpec tr = mcbs::TransitionSpec::strontium_blue();
inline const double theta0 = 1.0 * mcbs::units::deg;
inline const double h = 8.0 * mcbs::units::mm;
inline const double sigma_z = 0.9 * mcbs::units::mm;
inline const double k = tr.wavenumber();
inline const double phi = mcbs::envelope_half_width(theta0, k, sigma_z);

}  // namespace testing_geometry
