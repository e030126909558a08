#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xtpu/error.hpp"
#include "xtpu/random.hpp"

namespace xtpu {

/// One supply level. Codes are dense 0..n-1 in increasing voltage order, so the
/// highest code is the nominal (exact) level.
struct VoltageLevel {
  int code = 0;
  double volts = 0.0;
  friend bool operator==(const VoltageLevel&, const VoltageLevel&) = default;
};

inline constexpr double kVoltTolerance = 1e-9;

/// Build the dense level list from a set of supply voltages (any order).
inline std::vector<VoltageLevel> make_levels(std::vector<double> volts) {
  if (volts.empty()) fail(ErrorKind::config, "at least one voltage level is required");
  std::sort(volts.begin(), volts.end());
  std::vector<VoltageLevel> levels;
  for (std::size_t i = 0; i < volts.size(); ++i) {
    if (!(volts[i] > 0.0)) fail(ErrorKind::config, "voltage levels must be positive");
    if (i > 0 && volts[i] - volts[i - 1] <= kVoltTolerance)
      fail(ErrorKind::config, "duplicate voltage level " + std::to_string(volts[i]));
    levels.push_back({static_cast<int>(i), volts[i]});
  }
  return levels;
}

/// Measured (k PEs, variance[, mean]) calibration point of one level.
struct CalibrationRow {
  std::size_t k = 0;
  double variance = 0.0;
  std::optional<double> mean;
};

struct LevelModel {
  VoltageLevel level;
  std::vector<CalibrationRow> rows;
  double single_pe_mean = 0.0;
  double single_pe_variance = 0.0;
  double residual_rms = 0.0;  // RMS of (measured - k * fitted variance) over rows
  bool fitted = false;
};

struct ColumnStats {
  double mean = 0.0;
  double variance = 0.0;
};

/// Per-voltage statistical error model of one VOS multiplier PE, in
/// accumulator LSBs. The nominal level is exact: mean 0, variance 0.
class ErrorModelTable {
 public:
  ErrorModelTable() = default;
  explicit ErrorModelTable(std::vector<VoltageLevel> levels) {
    if (levels.empty()) fail(ErrorKind::config, "error model needs at least the nominal level");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (levels[i].code != static_cast<int>(i)) fail(ErrorKind::config, "voltage codes must be dense 0..n-1");
      if (i > 0 && !(levels[i].volts > levels[i - 1].volts))
        fail(ErrorKind::config, "voltage levels must increase with code");
      models_.push_back({levels[i], {}, 0.0, 0.0, 0.0, false});
    }
    models_.back().fitted = true;  // nominal is exact by definition
  }

  /// Directly specified single-PE statistics (volts ascending; last is nominal
  /// and must have zero variance and mean).
  static ErrorModelTable from_single_pe(const std::vector<double>& volts, const std::vector<double>& variances,
                                        const std::vector<double>& means = {}) {
    if (volts.size() != variances.size() || (!means.empty() && means.size() != volts.size()))
      fail(ErrorKind::dimension, "level/variance/mean lists differ in length");
    ErrorModelTable t(make_levels(volts));
    for (std::size_t i = 0; i < volts.size(); ++i) {
      auto& m = t.models_[static_cast<std::size_t>(t.by_volts(volts[i]).code)];
      if (variances[i] < 0.0) fail(ErrorKind::range, "negative variance");
      m.single_pe_variance = variances[i];
      m.single_pe_mean = means.empty() ? 0.0 : means[i];
      m.fitted = true;
    }
    if (t.models_.back().single_pe_variance != 0.0 || t.models_.back().single_pe_mean != 0.0)
      fail(ErrorKind::range, "nominal level must be exact (zero mean and variance)");
    return t;
  }

  std::size_t size() const { return models_.size(); }
  std::vector<VoltageLevel> levels() const {
    std::vector<VoltageLevel> v;
    for (const auto& m : models_) v.push_back(m.level);
    return v;
  }
  const VoltageLevel& nominal() const { return models_.back().level; }
  int nominal_code() const { return nominal().code; }
  bool is_nominal(int code) const { return code == nominal_code(); }

  const LevelModel& level(int code) const {
    if (code < 0 || static_cast<std::size_t>(code) >= models_.size())
      fail(ErrorKind::range, "voltage code " + std::to_string(code) + " out of range");
    return models_[static_cast<std::size_t>(code)];
  }
  LevelModel& level(int code) {
    return const_cast<LevelModel&>(static_cast<const ErrorModelTable&>(*this).level(code));
  }

  const VoltageLevel& by_volts(double v) const {
    for (const auto& m : models_)
      if (std::abs(m.level.volts - v) <= kVoltTolerance) return m.level;
    fail(ErrorKind::range, "unknown voltage " + std::to_string(v) + " V");
  }

  bool fitted() const {
    return std::all_of(models_.begin(), models_.end(), [](const LevelModel& m) { return m.fitted; });
  }

  void add_row(double volts, CalibrationRow row) {
    if (row.k == 0) fail(ErrorKind::range, "calibration row needs k >= 1");
    if (!(row.variance >= 0.0)) fail(ErrorKind::range, "negative variance in calibration row");
    const int code = by_volts(volts).code;
    if (is_nominal(code)) {
      if (row.variance != 0.0 || row.mean.value_or(0.0) != 0.0)
        fail(ErrorKind::range, "nominal level is exact; its rows must be zero");
      return;
    }
    auto& m = level(code);
    m.rows.push_back(row);
    m.fitted = false;
  }

 private:
  std::vector<LevelModel> models_;
};

// ---------------------------------------------------------------------------
// Variance CSV: voltage,k,variance[,mean]

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_real(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::parse, "malformed " + what + " '" + s + "'");
  }
}

}  // namespace detail

inline ErrorModelTable parse_variance_csv(std::istream& in, const std::vector<VoltageLevel>& levels) {
  ErrorModelTable table(levels);
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  bool has_mean = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto cells = detail::split_csv(line);
    const std::string where = "variance CSV line " + std::to_string(lineno) + ": ";
    if (!header_seen) {
      if (cells.size() < 3 || cells[0] != "voltage" || cells[1] != "k" || cells[2] != "variance" ||
          (cells.size() == 4 && cells[3] != "mean") || cells.size() > 4)
        fail(ErrorKind::parse, where + "expected header voltage,k,variance[,mean]");
      has_mean = cells.size() == 4;
      header_seen = true;
      continue;
    }
    if (cells.size() != (has_mean ? 4u : 3u) && !(has_mean && cells.size() == 3))
      fail(ErrorKind::parse, where + "wrong number of fields");
    CalibrationRow row;
    const double volts = detail::parse_real(cells[0], "voltage");
    const double k = detail::parse_real(cells[1], "k");
    if (k < 1.0 || k != std::floor(k)) fail(ErrorKind::parse, where + "k must be a positive integer");
    row.k = static_cast<std::size_t>(k);
    row.variance = detail::parse_real(cells[2], "variance");
    if (row.variance < 0.0) fail(ErrorKind::range, where + "negative variance");
    if (has_mean && cells.size() == 4 && !cells[3].empty()) row.mean = detail::parse_real(cells[3], "mean");
    try {
      table.add_row(volts, row);
    } catch (const Error& e) {
      fail(e.kind(), where + e.what());
    }
  }
  if (!header_seen) fail(ErrorKind::parse, "variance CSV is empty");
  for (const auto& lv : levels) {
    if (table.is_nominal(lv.code)) continue;
    if (table.level(lv.code).rows.empty())
      fail(ErrorKind::insufficient, "variance CSV has no rows for declared level " + std::to_string(lv.volts) + " V");
  }
  return table;
}

/// Load calibration rows for the declared levels; the highest is nominal and
/// gets a synthesized exact (zero) model. Fitting is a separate step.
inline ErrorModelTable load_variance_table(const std::filesystem::path& path, const std::vector<double>& volts) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open variance CSV " + path.string());
  return parse_variance_csv(in, make_levels(volts));
}

/// Least-squares slope through the origin of variance vs k per level:
///   sigma^2 = sum(k * var) / sum(k^2)
/// Single-PE mean is the average of (row mean / k) over rows that carry one.
inline ErrorModelTable fit_linear_scaling(ErrorModelTable table) {
  for (const auto& lv : table.levels()) {
    if (table.is_nominal(lv.code)) continue;
    auto& m = table.level(lv.code);
    if (m.rows.size() < 2)
      fail(ErrorKind::insufficient, "level " + std::to_string(lv.volts) + " V needs at least 2 calibration rows, has " +
                                        std::to_string(m.rows.size()));
    double skv = 0.0, skk = 0.0, mean_sum = 0.0;
    std::size_t mean_rows = 0;
    for (const auto& r : m.rows) {
      const double k = static_cast<double>(r.k);
      skv += k * r.variance;
      skk += k * k;
      if (r.mean) {
        mean_sum += *r.mean / k;
        ++mean_rows;
      }
    }
    m.single_pe_variance = skv / skk;
    m.single_pe_mean = mean_rows ? mean_sum / static_cast<double>(mean_rows) : 0.0;
    double rss = 0.0;
    for (const auto& r : m.rows) {
      const double d = r.variance - static_cast<double>(r.k) * m.single_pe_variance;
      rss += d * d;
    }
    m.residual_rms = std::sqrt(rss / static_cast<double>(m.rows.size()));
    m.fitted = true;
  }
  return table;
}

/// Statistics of the summed error of a column of k independent PEs.
inline ColumnStats column_error_stats(const ErrorModelTable& table, int code, std::size_t k) {
  const auto& m = table.level(code);
  if (!m.fitted) fail(ErrorKind::insufficient, "error model level is not fitted");
  const double kk = static_cast<double>(k);
  return {kk * m.single_pe_mean, kk * m.single_pe_variance};
}

/// One multiplier error draw, rounded half away from zero. Nominal never draws.
inline std::int64_t sample_pe_error(const ErrorModelTable& table, int code, Rng& rng) {
  const auto& m = table.level(code);
  if (!m.fitted) fail(ErrorKind::insufficient, "error model level is not fitted");
  if (table.is_nominal(code)) return 0;
  std::normal_distribution<double> d(m.single_pe_mean, std::sqrt(m.single_pe_variance));
  return std::llround(d(rng));
}

inline nlohmann::json table_to_json(const ErrorModelTable& t) {
  nlohmann::json doc;
  doc["nominal_volts"] = t.nominal().volts;
  doc["levels"] = nlohmann::json::array();
  for (const auto& lv : t.levels()) {
    const auto& m = t.level(lv.code);
    nlohmann::json j{{"code", lv.code},
                     {"volts", lv.volts},
                     {"nominal", t.is_nominal(lv.code)},
                     {"fitted", m.fitted},
                     {"single_pe_mean", m.single_pe_mean},
                     {"single_pe_variance", m.single_pe_variance},
                     {"residual_rms", m.residual_rms},
                     {"rows", m.rows.size()}};
    doc["levels"].push_back(std::move(j));
  }
  return doc;
}

}  // namespace xtpu
