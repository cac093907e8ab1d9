#pragma once

#include <fmt/format.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcbs/ccd.hpp"
#include "mcbs/fringe.hpp"
#include "mcbs/radiation.hpp"

namespace mcbs::io {

using json = nlohmann::json;

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File was readable but does not follow the documented schema.
class ParseError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kPatternHeader = "theta_rad,intensity_I0,stderr";
inline constexpr const char* kProfileHeader = "theta_rad,counts";
inline constexpr const char* kCurveHeader = "s,contrast,contrast_stderr,model";

/// Shortest round-trip representation; "nan"/"inf" for non-finite values.
inline std::string num(double v) { return fmt::format("{}", v); }

/// Non-finite doubles become null in JSON.
inline json jnum(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return in;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string pattern_csv(const AngularPattern& p) {
  std::string s = std::string(kPatternHeader) + "\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double se = p.std_error.size() == p.size() ? p.std_error[i] : 0.0;
    s += fmt::format("{},{},{}\n", p.grid.angles[i], p.intensity[i], se);
  }
  return s;
}

inline void write_pattern_csv(const std::filesystem::path& path, const AngularPattern& p) {
  write_text(path, pattern_csv(p));
}

namespace detail {
inline std::vector<std::vector<double>> read_numeric_csv(const std::filesystem::path& path, std::string& header,
                                                         std::size_t columns) {
  auto in = open_in(path);
  if (!std::getline(in, header)) throw ParseError(path.string() + ": empty file");
  if (!header.empty() && header.back() == '\r') header.pop_back();
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw ParseError(fmt::format("{}:{}: not a number: '{}'", path.string(), lineno, cell));
      }
    }
    if (row.size() != columns)
      throw ParseError(fmt::format("{}:{}: expected {} columns, got {}", path.string(), lineno, columns, row.size()));
    rows.push_back(std::move(row));
  }
  return rows;
}
}  // namespace detail

/// Reads a pattern CSV (theta_rad,intensity_I0,stderr) or a reduced profile CSV (theta_rad,counts).
inline AngularPattern read_pattern_csv(const std::filesystem::path& path) {
  std::string header;
  {
    auto in = open_in(path);
    std::getline(in, header);
    if (!header.empty() && header.back() == '\r') header.pop_back();
  }
  const bool profile = header == kProfileHeader;
  if (!profile && header != kPatternHeader)
    throw ParseError(path.string() + ": unexpected header '" + header + "'");
  const auto rows = detail::read_numeric_csv(path, header, profile ? 2 : 3);
  if (rows.size() < 2) throw ParseError(path.string() + ": fewer than 2 data rows");
  AngularPattern p;
  bool any_err = false;
  for (const auto& r : rows) {
    p.grid.angles.push_back(r[0]);
    p.intensity.push_back(r[1]);
    p.std_error.push_back(profile ? 0.0 : r[2]);
    any_err = any_err || (!profile && r[2] > 0.0);
  }
  if (!any_err) p.std_error.clear();
  try {
    p.grid.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  p.grid.center = 0.5 * (p.grid.angles.front() + p.grid.angles.back());
  return p;
}

inline void write_profile_csv(const std::filesystem::path& path, const ccd::ReducedProfile& p) {
  std::string s = std::string(kProfileHeader) + "\n";
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.valid[i]) s += fmt::format("{},{}\n", p.theta[i], p.intensity[i]);
  write_text(path, s);
}

/// Externally reduced profile (e.g. digitised data) in the theta_rad,counts schema.
inline ccd::ReducedProfile read_profile_csv(const std::filesystem::path& path,
                                            ccd::ProfileKind kind = ccd::ProfileKind::fluorescence_only) {
  std::string header;
  const auto rows = detail::read_numeric_csv(path, header, 2);
  if (header != kProfileHeader) throw ParseError(path.string() + ": unexpected header '" + header + "'");
  ccd::ReducedProfile p;
  p.kind = kind;
  for (const auto& r : rows) {
    if (!p.theta.empty() && !(r[0] > p.theta.back())) throw ParseError(path.string() + ": theta must increase");
    p.theta.push_back(r[0]);
    p.intensity.push_back(r[1]);
    p.std_error.push_back(0.0);
    p.pixel_count.push_back(0);
    p.valid.push_back(true);
  }
  return p;
}

inline json fit_to_json(const FringeFitResult& f) {
  return {{"period_theta_f", jnum(f.period_theta_f)},
          {"period_stderr", jnum(f.period_stderr)},
          {"envelope_phi", jnum(f.envelope_phi)},
          {"envelope_stderr", jnum(f.envelope_stderr)},
          {"contrast", jnum(f.contrast)},
          {"contrast_stderr", jnum(f.contrast_stderr)},
          {"center_theta0", jnum(f.center_theta0)},
          {"center_stderr", jnum(f.center_stderr)},
          {"phase", jnum(f.phase)},
          {"background", jnum(f.background)},
          {"inferred_h", jnum(f.inferred_h)},
          {"inferred_sigma_z", jnum(f.inferred_sigma_z)},
          {"residual_rms", jnum(f.residual_rms)},
          {"converged", f.converged},
          {"degenerate", f.degenerate},
          {"used_raw_contrast", f.used_raw_contrast},
          {"iterations", f.iterations},
          {"message", f.message}};
}

inline std::string curve_csv(const ContrastCurve& c) {
  std::string s = std::string(kCurveHeader) + "\n";
  for (std::size_t i = 0; i < c.s_values.size(); ++i)
    s += fmt::format("{},{},{},{}\n", c.s_values[i], c.contrast_values[i], c.uncertainty[i], to_string(c.model));
  return s;
}

inline json curve_to_json(const ContrastCurve& c) {
  json pts = json::array();
  for (std::size_t i = 0; i < c.s_values.size(); ++i)
    pts.push_back({{"s", c.s_values[i]},
                   {"contrast", jnum(c.contrast_values[i])},
                   {"contrast_stderr", jnum(c.uncertainty[i])},
                   {"converged", static_cast<bool>(c.converged[i])}});
  return {{"model", to_string(c.model)}, {"points", pts}};
}

struct FrameHeader {
  std::size_t rows = 0, cols = 0;
  double pixel_scale_rad = 0.0;
  double center_row = 0.0, center_col = 0.0;
};

/// Frame as <stem>.bin (row-major float64, little-endian host order) + <stem>.json header.
inline void write_frame(const std::filesystem::path& stem, const ccd::Frame& f) {
  const json header = {{"rows", f.rows},
                       {"cols", f.cols},
                       {"pixel_scale_rad", f.pixel_scale},
                       {"center_row", f.center_row},
                       {"center_col", f.center_col}};
  write_text(stem.string() + ".json", header.dump(2) + "\n");
  auto out = open_out(stem.string() + ".bin");
  out.write(reinterpret_cast<const char*>(f.pixels.data()), static_cast<std::streamsize>(f.pixels.size() * sizeof(double)));
  if (!out) throw IoError("write failed: " + stem.string() + ".bin");
}

inline ccd::Frame read_frame(const std::filesystem::path& stem) {
  json header;
  {
    auto in = open_in(stem.string() + ".json");
    try {
      in >> header;
    } catch (const json::exception& e) {
      throw ParseError(stem.string() + ".json: " + e.what());
    }
  }
  ccd::Frame f;
  try {
    f.rows = header.at("rows").get<std::size_t>();
    f.cols = header.at("cols").get<std::size_t>();
    f.pixel_scale = header.at("pixel_scale_rad").get<double>();
    f.center_row = header.at("center_row").get<double>();
    f.center_col = header.at("center_col").get<double>();
  } catch (const json::exception& e) {
    throw ParseError(stem.string() + ".json: " + e.what());
  }
  f.pixels.resize(f.rows * f.cols);
  auto in = open_in(stem.string() + ".bin");
  in.read(reinterpret_cast<char*>(f.pixels.data()), static_cast<std::streamsize>(f.pixels.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(f.pixels.size() * sizeof(double)))
    throw ParseError(stem.string() + ".bin: truncated frame");
  return f;
}

/// FNV-1a 64-bit, hex-encoded.
inline std::string hash_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace mcbs::io
