#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "xtpu/error.hpp"
#include "xtpu/error_model.hpp"

namespace xtpu {

inline constexpr double kSecondsPerYear = 365.25 * 24.0 * 3600.0;

enum class Device { pmos, nmos };

inline std::string_view to_string(Device d) { return d == Device::pmos ? "PMOS" : "NMOS"; }

inline Device parse_device(std::string_view s) {
  if (s == "PMOS" || s == "pmos") return Device::pmos;
  if (s == "NMOS" || s == "nmos") return Device::nmos;
  fail(ErrorKind::config, "unknown device kind '" + std::string(s) + "'");
}

/// BTI threshold-shift and alpha-power delay constants for one device kind.
/// Exponent defaults are placeholders; A and gamma normally come from
/// calibrate_aging.
struct AgingParams {
  Device device = Device::pmos;
  double A = 1.0;
  double kappa = 0.0;       // activation term, K
  double alpha_t = 0.17;    // time exponent
  double gamma = 1.0;       // oxide-field exponent
  double beta = 0.2;        // duty-cycle exponent
  double T_inv = 1.0;       // nm
  double vth0 = 0.3;        // V
  double alpha_delay = 1.3;
  double theta = 350.0;     // K
  double duty = 0.5;

  void validate() const {
    if (!(T_inv > 0.0)) fail(ErrorKind::config, "T_inv must be positive");
    if (!(vth0 > 0.0)) fail(ErrorKind::config, "vth0 must be positive");
    if (!(alpha_delay > 0.0)) fail(ErrorKind::config, "alpha_delay must be positive");
    if (!(theta > 0.0)) fail(ErrorKind::config, "theta must be positive");
    if (!(duty > 0.0 && duty <= 1.0)) fail(ErrorKind::config, "duty must lie in (0, 1]");
    if (!(A > 0.0)) fail(ErrorKind::config, "A must be positive");
  }
};

/// Threshold shift after `t_seconds` of stress at supply v_dd.
inline double delta_vth(const AgingParams& p, double v_dd, double t_seconds, double theta, double duty_f) {
  if (!(v_dd > p.vth0)) fail(ErrorKind::domain, "v_dd must exceed vth0");
  if (!(t_seconds >= 0.0)) fail(ErrorKind::domain, "stress time must be nonnegative");
  if (!(duty_f > 0.0 && duty_f <= 1.0)) fail(ErrorKind::domain, "duty factor must lie in (0, 1]");
  if (!(theta > 0.0)) fail(ErrorKind::domain, "temperature must be positive");
  if (t_seconds == 0.0) return 0.0;
  const double field = (v_dd - p.vth0) / p.T_inv;
  return p.A * std::exp(p.kappa / theta) * std::pow(t_seconds, p.alpha_t) * std::pow(field, p.gamma) *
         std::pow(duty_f, p.beta);
}

inline double delta_vth_years(const AgingParams& p, double v_dd, double years) {
  return delta_vth(p, v_dd, years * kSecondsPerYear, p.theta, p.duty);
}

/// Alpha-power-law gate delay, arbitrary units.
inline double delay_factor(double v_dd, double vth, double alpha_delay) {
  if (!(v_dd > vth)) fail(ErrorKind::domain, "v_dd must exceed vth");
  return v_dd / std::pow(v_dd - vth, alpha_delay);
}

struct AgingTarget {
  double v_dd = 0.0;
  double years = 0.0;
  double relative_shift = 0.0;  // delta_vth / vth0
};

struct AgingCalibration {
  AgingParams params;
  double max_relative_error = 0.0;  // over targets
};

inline double aging_target_error(const AgingParams& p, std::span<const AgingTarget> targets) {
  double worst = 0.0;
  for (const auto& t : targets) {
    const double got = delta_vth_years(p, t.v_dd, t.years) / p.vth0;
    worst = std::max(worst, std::abs(got / t.relative_shift - 1.0));
  }
  return worst;
}

/// Fit A and gamma to the targets by least squares on log(delta_vth), which
/// is linear in (log A, gamma). Two targets with distinct fields solve exactly.
/// Parameters that already reproduce the targets are returned unchanged.
inline AgingCalibration calibrate_aging(std::span<const AgingTarget> targets, const AgingParams& fixed) {
  fixed.validate();
  if (targets.size() < 2) fail(ErrorKind::insufficient, "aging calibration needs at least two targets");
  for (const auto& t : targets) {
    if (!(t.years > 0.0) || !(t.relative_shift > 0.0))
      fail(ErrorKind::domain, "aging targets need positive years and shift");
    if (!(t.v_dd > fixed.vth0)) fail(ErrorKind::domain, "aging target v_dd must exceed vth0");
  }
  if (aging_target_error(fixed, targets) < 1e-12) return {fixed, 0.0};

  std::vector<double> xs, ys;
  for (const auto& t : targets) {
    const double rest = fixed.kappa / fixed.theta + fixed.alpha_t * std::log(t.years * kSecondsPerYear) +
                        fixed.beta * std::log(fixed.duty);
    xs.push_back(std::log((t.v_dd - fixed.vth0) / fixed.T_inv));
    ys.push_back(std::log(t.relative_shift * fixed.vth0) - rest);
  }
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i] / n;
    my += ys[i] / n;
  }
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx <= 1e-24) fail(ErrorKind::insufficient, "aging targets are degenerate (identical oxide fields)");
  AgingCalibration c;
  c.params = fixed;
  c.params.gamma = sxy / sxx;
  c.params.A = std::exp(my - c.params.gamma * mx);
  c.max_relative_error = aging_target_error(c.params, targets);
  return c;
}

struct AgingLevelRow {
  double volts = 0.0;
  double delta_vth = 0.0;
  double delta_vth_pct = 0.0;       // of vth0
  double delay_increase_pct = 0.0;  // at the nominal rail
};

struct AgingReport {
  Device device = Device::pmos;
  double years = 0.0;
  std::vector<AgingLevelRow> rows;
  double nominal_delay_increase_pct = 0.0;
  double mixed_delay_increase_pct = 0.0;  // uniform over levels
  double lifetime_gain = 0.0;             // 1 - mixed / nominal
};

/// Per-level threshold shift after `years`, and the delay penalty it causes on
/// a path evaluated at the nominal (highest) rail. `duty` holds one value per
/// level, or a single value for all, or is empty for the params' default.
inline AgingReport lifetime_report(const AgingParams& p, const std::vector<VoltageLevel>& levels, double years,
                                   double theta, std::span<const double> duty = {}) {
  p.validate();
  if (levels.empty()) fail(ErrorKind::config, "lifetime report needs voltage levels");
  if (!(years >= 0.0)) fail(ErrorKind::domain, "years must be nonnegative");
  if (duty.size() > 1 && duty.size() != levels.size())
    fail(ErrorKind::dimension, "duty list must have one entry per level");
  const double v_nom = levels.back().volts;
  const double fresh = delay_factor(v_nom, p.vth0, p.alpha_delay);
  AgingReport r;
  r.device = p.device;
  r.years = years;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double f = duty.empty() ? p.duty : duty[duty.size() == 1 ? 0 : i];
    AgingLevelRow row;
    row.volts = levels[i].volts;
    row.delta_vth = delta_vth(p, row.volts, years * kSecondsPerYear, theta, f);
    row.delta_vth_pct = 100.0 * row.delta_vth / p.vth0;
    row.delay_increase_pct = 100.0 * (delay_factor(v_nom, p.vth0 + row.delta_vth, p.alpha_delay) / fresh - 1.0);
    r.rows.push_back(row);
    r.mixed_delay_increase_pct += row.delay_increase_pct / static_cast<double>(levels.size());
  }
  r.nominal_delay_increase_pct = r.rows.back().delay_increase_pct;
  r.lifetime_gain = r.nominal_delay_increase_pct > 0.0 ? 1.0 - r.mixed_delay_increase_pct / r.nominal_delay_increase_pct
                                                       : 0.0;
  return r;
}

/// CSV: vdd,device,delta_vth,delta_vth_pct,delay_increase_pct
inline void write_aging_csv(std::ostream& os, std::span<const AgingReport> reports) {
  os << "vdd,device,delta_vth,delta_vth_pct,delay_increase_pct\n";
  for (const auto& r : reports)
    for (const auto& row : r.rows)
      os << row.volts << ',' << to_string(r.device) << ',' << row.delta_vth << ',' << row.delta_vth_pct << ','
         << row.delay_increase_pct << '\n';
}

inline nlohmann::json aging_params_to_json(const AgingParams& p) {
  return {{"device", std::string(to_string(p.device))},
          {"A", p.A},
          {"kappa", p.kappa},
          {"alpha_t", p.alpha_t},
          {"gamma", p.gamma},
          {"beta", p.beta},
          {"T_inv", p.T_inv},
          {"vth0", p.vth0},
          {"alpha_delay", p.alpha_delay},
          {"theta", p.theta},
          {"duty", p.duty}};
}

/// Overlay the keys present in `j` onto `base`.
inline AgingParams aging_params_from_json(const nlohmann::json& j, AgingParams base = {}) {
  if (!j.is_object()) fail(ErrorKind::config, "aging params must be a JSON object");
  auto get = [&](const char* key, double& field) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) fail(ErrorKind::config, std::string("aging param '") + key + "' must be a number");
    field = j[key].get<double>();
  };
  if (j.contains("device")) base.device = parse_device(j["device"].get<std::string>());
  get("A", base.A);
  get("kappa", base.kappa);
  get("alpha_t", base.alpha_t);
  get("gamma", base.gamma);
  get("beta", base.beta);
  get("T_inv", base.T_inv);
  get("vth0", base.vth0);
  get("alpha_delay", base.alpha_delay);
  get("theta", base.theta);
  get("duty", base.duty);
  base.validate();
  return base;
}

inline nlohmann::json aging_summary_json(const AgingReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"vdd", row.volts},
                    {"delta_vth", row.delta_vth},
                    {"delta_vth_pct", row.delta_vth_pct},
                    {"delay_increase_pct", row.delay_increase_pct}});
  return {{"device", std::string(to_string(r.device))},
          {"years", r.years},
          {"levels", rows},
          {"nominal_delay_increase_pct", r.nominal_delay_increase_pct},
          {"mixed_delay_increase_pct", r.mixed_delay_increase_pct},
          {"lifetime_gain", r.lifetime_gain}};
}

}  // namespace xtpu
