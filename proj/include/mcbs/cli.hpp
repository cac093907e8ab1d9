#pragma once

#include <fmt/format.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mcbs/ccd.hpp"
#include "mcbs/fringe.hpp"
#include "mcbs/io.hpp"
#include "mcbs/radiation.hpp"

namespace mcbs::cli {

namespace fs = std::filesystem;
using io::json;

enum ExitCode : int { kOk = 0, kUsage = 2, kIo = 3, kNumerical = 4 };

/// Invalid configuration; the message names the offending key.
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Fit or solve failed on otherwise valid input.
class NumericalFailure : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Run configuration in boundary units (nm, MHz as (2 pi) x MHz, degrees, mm).
struct RunConfig {
  // [transition]
  double wavelength_nm = 461.0;
  double gamma_MHz = 30.5;
  // [geometry]
  double theta0_deg = 1.0;
  double h_mm = 8.0;
  double sigma_z_mm = 0.9;
  double misalignment_mm = 0.0;
  // [drive] exactly one of s or (rabi_MHz, detuning_MHz)
  std::optional<double> s;
  std::optional<double> rabi_MHz;
  std::optional<double> detuning_MHz;
  // [simulation]
  std::uint64_t atom_count = 1'000'000;
  std::uint64_t realizations = 50;
  std::uint64_t seed = 0;
  std::uint64_t grid_points = 2001;
  double grid_half_span_phi = 3.0;  // grid covers theta0 +- this many Phi
  int threads = 0;
  // [output]
  std::string directory = "mcbs_out";
  std::string models = "total,elastic,analytic_linear";
  std::string formats = "csv,json";
  // [pipeline]
  double transmission = 0.30119421191220214;  // exp(-1.2)
  double noise_level = 0.01;
  bool shot_noise = false;
  double isotropic_background = 0.0;  // extra flat fluorescence, fraction of the pattern background
  double counts_per_unit = 1.0e5;
  double pixel_scale_mrad = 0.1;
  std::uint64_t frame_size = 640;
  double stray_ratio = 10.0;  // broad stray amplitude / fluorescence background
  std::string pattern_source = "total";  // total | analytic_linear
  double b0 = 0.6;
  double beam_waist_mm = 1.5;
  double cloud_radius_mm = 0.9;
  bool write_frames = false;

  TransitionSpec transition() const {
    return {wavelength_nm * units::nm, gamma_MHz * units::two_pi_MHz};
  }
  double theta0() const { return theta0_deg * units::deg; }
  double h() const { return h_mm * units::mm; }
  double sigma_z() const { return sigma_z_mm * units::mm; }
  double phi() const { return envelope_half_width(theta0(), transition().wavenumber(), sigma_z()); }

  /// s, either given directly or from (rabi, detuning).
  double saturation() const {
    if (s) return *s;
    const TransitionSpec tr = transition();
    DriveSpec d{*rabi_MHz * units::two_pi_MHz, *detuning_MHz * units::two_pi_MHz, theta0()};
    return saturation_parameter(d, tr);
  }

  void validate() const {
    auto require = [](bool ok, const char* key, const char* what) {
      if (!ok) throw ConfigError(fmt::format("{}: {}", key, what));
    };
    require(std::isfinite(wavelength_nm) && wavelength_nm > 0, "transition.wavelength_nm", "must be > 0");
    require(std::isfinite(gamma_MHz) && gamma_MHz > 0, "transition.gamma_MHz", "must be > 0");
    require(theta0_deg > 0 && theta0_deg < 90, "geometry.theta0_deg", "must be in (0, 90)");
    require(std::isfinite(h_mm), "geometry.h_mm", "must be finite");
    require(std::isfinite(sigma_z_mm) && sigma_z_mm > 0, "geometry.sigma_z_mm", "must be > 0");
    require(std::isfinite(misalignment_mm), "geometry.misalignment_mm", "must be finite");
    const bool has_rabi = rabi_MHz.has_value() || detuning_MHz.has_value();
    require(!(s && has_rabi), "drive.s", "give either s or (rabi_MHz, detuning_MHz), not both");
    require(s.has_value() || (rabi_MHz && detuning_MHz), "drive.s", "missing: give s or both rabi_MHz and detuning_MHz");
    if (s) require(std::isfinite(*s) && *s >= 0, "drive.s", "must be >= 0");
    if (rabi_MHz) require(std::isfinite(*rabi_MHz) && *rabi_MHz >= 0, "drive.rabi_MHz", "must be >= 0");
    if (detuning_MHz) require(std::isfinite(*detuning_MHz), "drive.detuning_MHz", "must be finite");
    require(atom_count >= 1 && atom_count <= 100'000'000, "simulation.atom_count", "must be in [1, 1e8]");
    require(realizations >= 1, "simulation.realizations", "must be >= 1");
    require(grid_points >= 16 && grid_points <= 1'000'000, "simulation.grid_points", "must be in [16, 1e6]");
    require(grid_half_span_phi > 0, "simulation.grid_half_span_phi", "must be > 0");
    require(threads >= 0, "simulation.threads", "must be >= 0");
    require(!directory.empty(), "output.directory", "must not be empty");
    require(transmission > 0 && transmission <= 1, "pipeline.transmission", "must be in (0, 1]");
    require(noise_level >= 0, "pipeline.noise_level", "must be >= 0");
    require(isotropic_background >= 0, "pipeline.isotropic_background", "must be >= 0");
    require(counts_per_unit > 0, "pipeline.counts_per_unit", "must be > 0");
    require(pixel_scale_mrad > 0, "pipeline.pixel_scale_mrad", "must be > 0");
    require(frame_size >= 64 && frame_size <= 8192, "pipeline.frame_size", "must be in [64, 8192]");
    require(stray_ratio >= 0, "pipeline.stray_ratio", "must be >= 0");
    require(pattern_source == "total" || pattern_source == "analytic_linear", "pipeline.pattern_source",
            "must be total or analytic_linear");
    require(b0 > 0, "pipeline.b0", "must be > 0");
    require(beam_waist_mm > 0, "pipeline.beam_waist_mm", "must be > 0");
    require(cloud_radius_mm > 0, "pipeline.cloud_radius_mm", "must be > 0");
    for (const auto& m : split_list(models)) {
      if (m == "analytic") continue;
      try {
        pattern_model_from_string(m);
      } catch (const std::invalid_argument&) {
        throw ConfigError("output.models: unknown model '" + m + "'");
      }
    }
  }

  static std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }
};

namespace detail {

using boost::property_tree::ptree;

template <typename T>
std::string to_text(const T& v) {
  if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
  else if constexpr (std::is_same_v<T, std::string>) return v;
  else return fmt::format("{}", v);
}

template <typename T>
T from_text(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1" || text == "yes") return true;
      if (text == "false" || text == "0" || text == "no") return false;
      throw std::invalid_argument(text);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, double>) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    } else if constexpr (std::is_same_v<T, int>) {
      const int v = std::stoi(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    } else {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
      // accept 1e6-style integers
      const double d = std::stod(text, &used);
      if (used != text.size() || d < 0 || d != std::floor(d)) throw std::invalid_argument(text);
      if (text.find_first_of(".eE") == std::string::npos) return static_cast<T>(std::stoull(text));
      return static_cast<T>(d);
    }
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("{}: invalid value '{}'", key, text));
  }
}

/// Visits every config field as (section.key, reference).
template <typename Visitor>
void for_each_field(RunConfig& c, Visitor&& v) {
  v("transition.wavelength_nm", c.wavelength_nm);
  v("transition.gamma_MHz", c.gamma_MHz);
  v("geometry.theta0_deg", c.theta0_deg);
  v("geometry.h_mm", c.h_mm);
  v("geometry.sigma_z_mm", c.sigma_z_mm);
  v("geometry.misalignment_mm", c.misalignment_mm);
  v("drive.s", c.s);
  v("drive.rabi_MHz", c.rabi_MHz);
  v("drive.detuning_MHz", c.detuning_MHz);
  v("simulation.atom_count", c.atom_count);
  v("simulation.realizations", c.realizations);
  v("simulation.seed", c.seed);
  v("simulation.grid_points", c.grid_points);
  v("simulation.grid_half_span_phi", c.grid_half_span_phi);
  v("simulation.threads", c.threads);
  v("output.directory", c.directory);
  v("output.models", c.models);
  v("output.formats", c.formats);
  v("pipeline.transmission", c.transmission);
  v("pipeline.noise_level", c.noise_level);
  v("pipeline.shot_noise", c.shot_noise);
  v("pipeline.isotropic_background", c.isotropic_background);
  v("pipeline.counts_per_unit", c.counts_per_unit);
  v("pipeline.pixel_scale_mrad", c.pixel_scale_mrad);
  v("pipeline.frame_size", c.frame_size);
  v("pipeline.stray_ratio", c.stray_ratio);
  v("pipeline.pattern_source", c.pattern_source);
  v("pipeline.b0", c.b0);
  v("pipeline.beam_waist_mm", c.beam_waist_mm);
  v("pipeline.cloud_radius_mm", c.cloud_radius_mm);
  v("pipeline.write_frames", c.write_frames);
}

template <typename T>
struct is_optional : std::false_type {};
template <typename T>
struct is_optional<std::optional<T>> : std::true_type {};

}  // namespace detail

/// Sets one field from "section.key" and a textual value. An empty value clears optional keys.
inline void set_field(RunConfig& cfg, const std::string& dotted, const std::string& value) {
  bool found = false;
  detail::for_each_field(cfg, [&](const char* name, auto& field) {
    if (dotted != name) return;
    found = true;
    using F = std::decay_t<decltype(field)>;
    if constexpr (detail::is_optional<F>::value) {
      if (value.empty()) field.reset();
      else field = detail::from_text<typename F::value_type>(dotted, value);
    } else {
      field = detail::from_text<F>(dotted, value);
    }
  });
  if (!found) throw ConfigError(dotted + ": unknown configuration key");
}

/// Canonical INI text; optional keys appear only when set.
inline std::string to_ini(const RunConfig& cfg) {
  RunConfig copy = cfg;
  detail::ptree tree;
  detail::for_each_field(copy, [&](const char* name, auto& field) {
    using F = std::decay_t<decltype(field)>;
    if constexpr (detail::is_optional<F>::value) {
      if (field) tree.put(detail::ptree::path_type(name, '.'), detail::to_text(*field));
    } else {
      tree.put(detail::ptree::path_type(name, '.'), detail::to_text(field));
    }
  });
  std::ostringstream os;
  boost::property_tree::write_ini(os, tree);
  return os.str();
}

inline RunConfig parse_ini(std::istream& in, const std::string& source) {
  detail::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  RunConfig cfg;
  cfg.s.reset();
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(section + ": key outside a [section]");
    for (const auto& [key, value] : body) set_field(cfg, section + "." + key, value.get_value<std::string>());
  }
  return cfg;
}

inline RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config: file not found: " + path.string());
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  return parse_ini(in, path.string());
}

inline RunConfig default_config() {
  RunConfig c;
  c.s = 0.01;
  return c;
}

inline std::string config_hash(const RunConfig& cfg) { return io::hash_hex(to_ini(cfg)); }

inline json geometry_json(const RunConfig& c) {
  return {{"wavelength_nm", c.wavelength_nm}, {"gamma_MHz", c.gamma_MHz},     {"theta0_deg", c.theta0_deg},
          {"h_mm", c.h_mm},                   {"sigma_z_mm", c.sigma_z_mm},   {"misalignment_mm", c.misalignment_mm},
          {"atom_count", c.atom_count}};
}

inline json metadata(const RunConfig& c, const std::string& kind) {
  return {{"kind", kind},
          {"config_hash", config_hash(c)},
          {"seed", c.seed},
          {"realizations", c.realizations},
          {"geometry", geometry_json(c)}};
}

inline void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline SimulationRequest simulation_request(const RunConfig& c, PatternModel model) {
  SimulationRequest req;
  req.cloud = {c.sigma_z(), c.h() + c.misalignment_mm * units::mm, static_cast<std::size_t>(c.atom_count)};
  req.grid = make_grid(c.theta0(), c.grid_half_span_phi * c.phi(), static_cast<std::size_t>(c.grid_points));
  req.model = model;
  req.s = c.saturation();
  req.theta0 = c.theta0();
  req.transition = c.transition();
  req.seed = c.seed;
  req.realizations = static_cast<std::size_t>(c.realizations);
  return req;
}

/// Disorder-averaged patterns for every requested model; returns the files written.
inline std::vector<fs::path> cmd_simulate(const RunConfig& c, std::ostream& out) {
  c.validate();
  const fs::path dir = c.directory;
  const auto formats = RunConfig::split_list(c.formats);
  const bool csv = std::find(formats.begin(), formats.end(), "csv") != formats.end();
  const bool js = std::find(formats.begin(), formats.end(), "json") != formats.end();
  std::vector<PatternModel> micro;
  bool analytic = false;
  for (const auto& name : RunConfig::split_list(c.models)) {
    if (name == "analytic" || name == "analytic_linear") analytic = true;
    else micro.push_back(pattern_model_from_string(name));
  }
  std::vector<AngularPattern> patterns;
  if (!micro.empty()) {
    const auto req = simulation_request(c, micro.front());
    const std::vector<double> s_values(micro.size(), req.s);
    patterns = simulate_models(req, micro, s_values, resolve_threads(c.threads));
  }
  if (analytic) {
    const auto req = simulation_request(c, PatternModel::analytic_linear);
    patterns.push_back(analytic_linear_intensity(req.grid, req.theta0, req.cloud.mirror_distance_h, c.sigma_z(),
                                                 req.s, req.transition));
  }
  std::vector<fs::path> written;
  for (const auto& p : patterns) {
    const std::string stem = "pattern_" + std::string(to_string(p.model));
    if (csv) {
      io::write_pattern_csv(dir / (stem + ".csv"), p);
      written.push_back(dir / (stem + ".csv"));
    }
    if (js) {
      json meta = metadata(c, "pattern");
      meta["model"] = to_string(p.model);
      meta["s"] = io::jnum(p.s);
      meta["realizations"] = p.realizations_averaged;
      meta["angle_coordinate"] = to_string(AngleCoordinate::cosine_exact);
      meta["background"] = pattern_background(p, c.theta0(), c.phi());
      write_json(dir / (stem + ".json"), meta);
      written.push_back(dir / (stem + ".json"));
    }
    out << fmt::format("{}: background {:.6g} I0 over {} realization(s)\n", to_string(p.model),
                       pattern_background(p, c.theta0(), c.phi()), p.realizations_averaged);
  }
  return written;
}

struct FitCommand {
  fs::path input;
  std::optional<fs::path> output;
  std::optional<double> phi_mrad;
  std::string coordinate = "cosine_exact";
};

inline FringeFitResult cmd_fit(const RunConfig& c, const FitCommand& fc, std::ostream& out) {
  const AngularPattern p = io::read_pattern_csv(fc.input);
  FitHints hints;
  hints.theta0 = c.theta0();
  hints.wavenumber = c.transition().wavenumber();
  hints.envelope_hint = fc.phi_mrad ? *fc.phi_mrad * units::mrad : c.phi();
  try {
    hints.coordinate = angle_coordinate_from_string(fc.coordinate);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("fit.coordinate: ") + e.what());
  }
  const auto fit = fit_fringes(p, hints);
  json j = io::fit_to_json(fit);
  j["metadata"] = metadata(c, "fit");
  j["metadata"]["input"] = fc.input.string();
  out << j.dump(2) << "\n";
  if (fc.output) write_json(*fc.output, j);
  if (!fit.converged) throw NumericalFailure(fit.message);
  return fit;
}

struct SweepCommand {
  std::string kind;    // mirror | saturation | single_atom
  std::string figure;  // fig3 | fig4 | fig5 | ""
  std::vector<double> values;
  std::string model = "both";  // total | elastic | both (saturation sweeps)
};

/// start,stop,count[,log]
inline std::vector<double> parse_range(const std::string& text) {
  const auto parts = RunConfig::split_list(text);
  if (parts.size() < 3 || parts.size() > 4) throw ConfigError("sweep.range: expected start,stop,count[,log]");
  const double a = detail::from_text<double>("sweep.range", parts[0]);
  const double b = detail::from_text<double>("sweep.range", parts[1]);
  const auto n = detail::from_text<std::uint64_t>("sweep.range", parts[2]);
  const bool log = parts.size() == 4 && parts[3] == "log";
  if (parts.size() == 4 && !log) throw ConfigError("sweep.range: fourth field must be 'log'");
  if (n == 0) throw ConfigError("sweep.range: empty range");
  if (log && !(a > 0 && b > 0)) throw ConfigError("sweep.range: log range needs positive bounds");
  std::vector<double> v;
  for (std::uint64_t i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    v.push_back(log ? a * std::pow(b / a, t) : a + (b - a) * t);
  }
  return v;
}

inline std::vector<double> log_space(double a, double b, int n) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(a * std::pow(b / a, static_cast<double>(i) / (n - 1)));
  return v;
}

inline void cmd_sweep(RunConfig c, SweepCommand sc, std::ostream& out) {
  if (sc.figure == "fig3") {
    sc.kind = "mirror";
    if (sc.values.empty())
      for (int h = -30; h <= 30; h += 5) sc.values.push_back(h);
  } else if (sc.figure == "fig5") {
    sc.kind = "saturation";
    if (sc.values.empty()) {
      sc.values = log_space(1e-2, 20.0, 10);
      for (double s : {1e2, 1e3, 1e4}) sc.values.push_back(s);
    }
  } else if (sc.figure == "fig4") {
    sc.kind = "single_atom";
  } else if (!sc.figure.empty()) {
    throw ConfigError("sweep.figure: expected fig3, fig4 or fig5");
  }
  c.validate();
  const fs::path dir = c.directory;
  const TransitionSpec tr = c.transition();
  const unsigned threads = resolve_threads(c.threads);

  if (sc.kind == "mirror") {
    if (sc.values.empty()) throw ConfigError("sweep.range: empty range");
    ScanSetup setup;
    setup.sigma_z = c.sigma_z();
    setup.atom_count = c.atom_count;
    setup.realizations = c.realizations;
    setup.seed = c.seed;
    setup.s = c.saturation();
    setup.theta0 = c.theta0();
    setup.transition = tr;
    setup.misalignment_x0 = c.misalignment_mm * units::mm;
    setup.grid_points = c.grid_points;
    std::vector<double> h;
    for (double v : sc.values) h.push_back(v * units::mm);
    const auto rows = mirror_scan(h, setup, threads);
    std::string csv = "h_nominal_mm,h_true_mm,inferred_h_mm,period_rad,contrast,valid\n";
    for (const auto& r : rows)
      csv += fmt::format("{},{},{},{},{},{}\n", r.h_nominal / units::mm, r.h_true / units::mm,
                         r.fit.inferred_h / units::mm, r.fit.period_theta_f, r.fit.contrast, r.valid ? 1 : 0);
    io::write_text(dir / "mirror_scan.csv", csv);
    json j = metadata(c, "mirror_scan");
    try {
      const auto mf = misalignment_fit(rows);
      j["slope_a"] = mf.slope_a;
      j["slope_stderr"] = mf.slope_stderr;
      j["offset_x0_mm"] = mf.offset_x0 / units::mm;
      j["offset_stderr_mm"] = mf.offset_stderr / units::mm;
      j["bracketed"] = mf.bracketed;
      j["warnings"] = mf.warnings;
      out << fmt::format("mirror scan: A = {:.4f} +- {:.4f}, x0 = {:.3f} +- {:.3f} mm\n", mf.slope_a,
                         mf.slope_stderr, mf.offset_x0 / units::mm, mf.offset_stderr / units::mm);
    } catch (const std::invalid_argument& e) {
      j["error"] = e.what();
      out << "mirror scan: misalignment fit failed: " << e.what() << "\n";
    }
    write_json(dir / "mirror_scan.json", j);
    return;
  }

  if (sc.kind == "saturation") {
    if (sc.values.empty()) throw ConfigError("sweep.range: empty range");
    std::sort(sc.values.begin(), sc.values.end());
    sc.values.erase(std::unique(sc.values.begin(), sc.values.end()), sc.values.end());
    CurveSetup setup;
    setup.h = c.h() + c.misalignment_mm * units::mm;
    setup.sigma_z = c.sigma_z();
    setup.atom_count = c.atom_count;
    setup.realizations = c.realizations;
    setup.seed = c.seed;
    setup.theta0 = c.theta0();
    setup.transition = tr;
    setup.grid_points = c.grid_points;
    std::vector<PatternModel> models;
    if (sc.model == "total" || sc.model == "both") models.push_back(PatternModel::total);
    if (sc.model == "elastic" || sc.model == "both") models.push_back(PatternModel::elastic);
    if (models.empty()) throw ConfigError("sweep.model: expected total, elastic or both");
    json j = metadata(c, "contrast_vs_saturation");
    for (auto m : models) {
      const auto curve = contrast_vs_saturation(sc.values, setup, m, threads);
      const std::string stem = "contrast_" + std::string(to_string(m));
      io::write_text(dir / (stem + ".csv"), io::curve_csv(curve));
      j[std::string(to_string(m))] = io::curve_to_json(curve);
      if (sc.figure == "fig5") {
        const auto band = contrast_band(sc.values, setup, m, 0.5 * units::mm, 0.1 * units::mm, threads);
        std::string csv = "s,lower,upper,model\n";
        for (std::size_t i = 0; i < band.s_values.size(); ++i)
          csv += fmt::format("{},{},{},{}\n", band.s_values[i], band.lower[i], band.upper[i], to_string(m));
        io::write_text(dir / (stem + "_band.csv"), csv);
      }
      for (std::size_t i = 0; i < curve.s_values.size(); ++i)
        out << fmt::format("{} s = {:<10.4g} C = {:.4f}\n", to_string(m), curve.s_values[i],
                           curve.contrast_values[i]);
    }
    write_json(dir / "contrast_vs_saturation.json", j);
    return;
  }

  if (sc.kind == "single_atom") {
    if (sc.values.empty()) sc.values = {0.01, 20.0};
    const double k = tr.wavenumber();
    // a few wavelengths: the envelope is invisible, fringes of each atom are undamped
    const auto grid = make_grid(c.theta0(), 4.0 * fringe_period(c.theta0(), k, c.h()), 801);
    for (double s : sc.values) {
      const auto fam = single_atom_family(8, 3.0, grid, s, c.theta0(), tr);
      std::string csv = "theta_rad";
      for (std::size_t j = 0; j < fam.z.size(); ++j) csv += fmt::format(",atom{}", j);
      csv += ",average\n";
      for (std::size_t i = 0; i < grid.size(); ++i) {
        csv += io::num(grid.angles[i]);
        for (const auto& p : fam.patterns) csv += "," + io::num(p.intensity[i]);
        csv += "," + io::num(fam.average.intensity[i]) + "\n";
      }
      io::write_text(dir / fmt::format("single_atom_s{}.csv", s), csv);
      out << fmt::format("single-atom family at s = {} written\n", s);
    }
    return;
  }
  throw ConfigError("sweep.kind: expected mirror, saturation or single_atom");
}

struct PipelineOutcome {
  ccd::SubtractionResult result;
  double injected_contrast = 0.0;
  double extracted_contrast = 0.0;
  double injected_background = 0.0;
};

/// synthesize -> reduce -> extract on frames rendered from a simulated pattern.
inline PipelineOutcome run_pipeline(const RunConfig& c, const AngularPattern& pattern, std::uint64_t noise_seed) {
  const double theta0 = c.theta0(), phi = c.phi();
  const double pattern_bg = pattern_background(pattern, theta0, phi);
  ccd::SynthesisParams sp;
  sp.transmission = c.transmission;
  sp.counts_per_unit = c.counts_per_unit;
  sp.isotropic_background = c.isotropic_background * c.counts_per_unit * pattern_bg;
  const double fluo_bg = c.counts_per_unit * pattern_bg + sp.isotropic_background;
  sp.noise = {c.noise_level, fluo_bg, c.shot_noise, noise_seed};
  ccd::StrayModel stray;
  stray.theta0 = theta0;
  stray.broad_amplitude = c.stray_ratio * fluo_bg;
  stray.peak_amplitude = 3.0 * c.stray_ratio * fluo_bg;
  ccd::FrameGeometry geom;
  geom.rows = geom.cols = c.frame_size;
  geom.pixel_scale = c.pixel_scale_mrad * units::mrad;
  geom.center_row = geom.center_col = 0.5 * static_cast<double>(c.frame_size);
  const auto frames = ccd::synthesize_frames(pattern, stray, sp, geom);
  const auto with = ccd::reduce_azimuthal(frames.with_atoms, {}, ccd::ProfileKind::with_atoms);
  const auto without = ccd::reduce_azimuthal(frames.without_atoms, {}, ccd::ProfileKind::without_atoms);

  PipelineOutcome o;
  o.result = ccd::extract_fluorescence(with, without, theta0, phi);
  o.injected_background = fluo_bg;
  FitHints hints;
  hints.theta0 = theta0;
  hints.wavenumber = c.transition().wavenumber();
  hints.envelope_hint = phi;
  auto extracted = ccd::profile_to_pattern(o.result.fluorescence_profile, theta0, theta0 - 3 * phi, theta0 + 3 * phi);
  AngularPattern injected = extracted;
  injected.std_error.clear();
  for (std::size_t i = 0; i < injected.size(); ++i)
    injected.intensity[i] = ccd::fluorescence_counts(pattern, sp, injected.grid.angles[i]);
  o.injected_contrast = fit_fringes(injected, hints).contrast;
  o.extracted_contrast = fit_fringes(extracted, hints).contrast;

  if (c.write_frames) {
    io::write_frame(fs::path(c.directory) / "frame_with_atoms", frames.with_atoms);
    io::write_frame(fs::path(c.directory) / "frame_without_atoms", frames.without_atoms);
  }
  io::write_profile_csv(fs::path(c.directory) / "profile_with_atoms.csv", with);
  io::write_profile_csv(fs::path(c.directory) / "profile_without_atoms.csv", without);
  io::write_profile_csv(fs::path(c.directory) / "profile_fluorescence.csv", o.result.fluorescence_profile);
  return o;
}

inline PipelineOutcome cmd_pipeline(const RunConfig& c, std::ostream& out) {
  c.validate();
  const fs::path dir = c.directory;
  AngularPattern pattern;
  if (c.pattern_source == "analytic_linear") {
    const auto req = simulation_request(c, PatternModel::analytic_linear);
    pattern = analytic_linear_intensity(req.grid, req.theta0, req.cloud.mirror_distance_h, c.sigma_z(), req.s,
                                        req.transition);
  } else {
    pattern = simulate_average(simulation_request(c, PatternModel::total), resolve_threads(c.threads));
  }
  PipelineOutcome o;
  try {
    o = run_pipeline(c, pattern, c.seed);
  } catch (const ccd::DegenerateSubtraction& e) {
    throw NumericalFailure(e.what());
  }

  std::vector<double> s_values = log_space(1e-2, 1e2, 21);
  const auto model = ccd::transmission_background_model(s_values, c.b0, c.beam_waist_mm * units::mm,
                                                        c.cloud_radius_mm * units::mm);
  std::string csv = "s,transmission,fluorescence\n";
  for (const auto& r : model) csv += fmt::format("{},{},{}\n", r.s, r.transmission, r.fluorescence);
  io::write_text(dir / "transmission_model.csv", csv);

  json j = metadata(c, "pipeline");
  j["transmission_T"] = o.result.transmission_T;
  j["transmission_stderr"] = o.result.transmission_stderr;
  j["background_I_fluo"] = o.result.background_I_fluo;
  j["background_stderr"] = o.result.background_stderr;
  j["fit_residual"] = o.result.fit_residual;
  j["injected_transmission"] = c.transmission;
  j["injected_background"] = o.injected_background;
  j["injected_contrast"] = o.injected_contrast;
  j["extracted_contrast"] = o.extracted_contrast;
  write_json(dir / "subtraction.json", j);
  out << fmt::format("T = {:.5f} (injected {:.5f}), I_fluo = {:.6g} (injected {:.6g}), C = {:.4f} (injected {:.4f})\n",
                     o.result.transmission_T, c.transmission, o.result.background_I_fluo, o.injected_background,
                     o.extracted_contrast, o.injected_contrast);
  return o;
}

inline json cmd_limits(const RunConfig& c, std::ostream& out) {
  c.validate();
  const double k = c.transition().wavenumber();
  const double h = c.h() + c.misalignment_mm * units::mm;
  const double s = c.saturation();
  json j = {{"fringe_period_rad", io::jnum(fringe_period(c.theta0(), k, h))},
            {"envelope_half_width_rad", envelope_half_width(c.theta0(), k, c.sigma_z())},
            {"fringe_count", fringe_count(h, c.sigma_z())},
            {"wavenumber_per_m", k},
            {"s", s},
            {"rabi_peak_rad_per_s", rabi_from_saturation(s, c.detuning_MHz.value_or(0.0) * units::two_pi_MHz,
                                                         c.transition())},
            {"unsaturated_fraction", unsaturated_fraction(s, 1u << 20)}};
  out << j.dump(2) << "\n";
  return j;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses argv, runs one subcommand, maps failures to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Mirror-assisted coherent backscattering simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::optional<double> s_flag, h_flag;
  std::optional<std::uint64_t> seed_flag, atoms_flag, realizations_flag;
  std::optional<int> threads_flag;
  std::string output_flag, model_flag;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "INI config file");
    sub->add_option("--set", sets, "Override section.key=value (repeatable)");
    sub->add_option("--s", s_flag, "Saturation parameter");
    sub->add_option("--h-mm", h_flag, "Mirror distance [mm]");
    sub->add_option("--seed", seed_flag, "Random seed");
    sub->add_option("--atoms", atoms_flag, "Atoms per realization");
    sub->add_option("--realizations", realizations_flag, "Disorder realizations");
    sub->add_option("--threads", threads_flag, "Worker threads (0 = all cores)");
    sub->add_option("-o,--output", output_flag, "Output directory");
  };

  auto* sim = app.add_subcommand("simulate", "Disorder-averaged angular patterns");
  add_common(sim);
  sim->add_option("--model", model_flag, "Comma list: total, elastic, analytic_linear, saturated_limit");

  FitCommand fc;
  std::string fit_out;
  std::optional<double> phi_flag;
  auto* fit = app.add_subcommand("fit", "Fit a pattern or profile CSV");
  add_common(fit);
  fit->add_option("pattern", fc.input, "Pattern CSV")->required();
  fit->add_option("--result", fit_out, "Write the fit result JSON here");
  fit->add_option("--phi-mrad", phi_flag, "Envelope half-width hint [mrad]");
  fit->add_option("--coordinate", fc.coordinate, "cosine_exact | small_angle");

  SweepCommand sc;
  std::string range_text, values_text;
  auto* sweep = app.add_subcommand("sweep", "Mirror or saturation sweep");
  add_common(sweep);
  sweep->add_option("--kind", sc.kind, "mirror | saturation | single_atom");
  sweep->add_option("--figure", sc.figure, "Preset: fig3 | fig4 | fig5");
  sweep->add_option("--range", range_text, "start,stop,count[,log] (mm for mirror, s for saturation)");
  sweep->add_option("--values", values_text, "Explicit comma-separated values");
  sweep->add_option("--model", sc.model, "total | elastic | both");

  auto* pipe = app.add_subcommand("pipeline", "Synthetic-frame stray-light subtraction");
  add_common(pipe);

  auto* lim = app.add_subcommand("limits", "Fringe period, envelope and fringe count");
  add_common(lim);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    RunConfig cfg = config_path.empty() ? default_config() : load_config(config_path);
    if (!config_path.empty() && !cfg.s && !cfg.rabi_MHz && !cfg.detuning_MHz) cfg.s = 0.01;
    if (const char* env = std::getenv("MCBS_SEED")) set_field(cfg, "simulation.seed", env);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      if (key == "drive.rabi_MHz" || key == "drive.detuning_MHz") cfg.s.reset();
      set_field(cfg, key, kv.substr(eq + 1));
    }
    if (s_flag) {
      cfg.s = *s_flag;
      cfg.rabi_MHz.reset();
      cfg.detuning_MHz.reset();
    }
    if (h_flag) cfg.h_mm = *h_flag;
    if (seed_flag) cfg.seed = *seed_flag;
    if (atoms_flag) cfg.atom_count = *atoms_flag;
    if (realizations_flag) cfg.realizations = *realizations_flag;
    if (threads_flag) cfg.threads = *threads_flag;
    if (!output_flag.empty()) cfg.directory = output_flag;
    if (!model_flag.empty()) cfg.models = model_flag;
    cfg.validate();

    if (*sim) {
      cmd_simulate(cfg, out);
    } else if (*fit) {
      if (!fit_out.empty()) fc.output = fit_out;
      fc.phi_mrad = phi_flag;
      cmd_fit(cfg, fc, out);
    } else if (*sweep) {
      if (!range_text.empty()) sc.values = parse_range(range_text);
      for (const auto& v : RunConfig::split_list(values_text)) sc.values.push_back(detail::from_text<double>("sweep.values", v));
      const bool explicit_range = !range_text.empty() || !values_text.empty();
      if (sc.figure.empty() && sc.values.empty() && sc.kind != "single_atom")
        throw ConfigError(explicit_range ? "sweep.range: empty range" : "sweep.range: give --range, --values or --figure");
      cmd_sweep(cfg, sc, out);
    } else if (*pipe) {
      cmd_pipeline(cfg, out);
    } else if (*lim) {
      cmd_limits(cfg, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const io::ParseError& e) {
    err << "input error: " << e.what() << "\n";
    return kUsage;
  } catch (const io::IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalFailure& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const NoFringeSignal& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const ccd::DegenerateSubtraction& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}

}  // namespace mcbs::cli
