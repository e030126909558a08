#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xtpu/aging.hpp"
#include "xtpu/assignment.hpp"
#include "xtpu/dataset.hpp"
#include "xtpu/error.hpp"
#include "xtpu/error_model.hpp"
#include "xtpu/model.hpp"
#include "xtpu/parallel.hpp"
#include "xtpu/random.hpp"
#include "xtpu/sensitivity.hpp"
#include "xtpu/systolic.hpp"

namespace xtpu {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct AgingConfig {
  double years = 10.0;
  std::optional<double> theta;
  std::vector<double> duty;  // empty, one value, or one per level
  std::optional<json> pmos;  // explicit params (overlay on defaults)
  std::optional<json> nmos;
  std::vector<AgingTarget> pmos_targets;
  std::vector<AgingTarget> nmos_targets;
  double pmos_vth0 = 0.3;
  double nmos_vth0 = 0.3;
};

struct RunConfig {
  fs::path base_dir = ".";
  std::optional<fs::path> model;
  std::optional<fs::path> images;
  std::optional<fs::path> labels;
  std::optional<fs::path> variance_csv;
  std::vector<double> voltages{0.5, 0.6, 0.7, 0.8};
  std::size_t array_n = 256;
  std::optional<unsigned> v_bits;
  std::vector<double> mse_ub{0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0};
  ObjectiveMode objective = ObjectiveMode::linear_v;
  EnergyParams energy;
  std::uint64_t seed = 1;
  SimulationMode mode = SimulationMode::statistical;
  fs::path out = "out";
  std::size_t calibration_samples = 256;
  std::size_t eval_samples = 0;  // 0: whole dataset
  SensitivityMethod sensitivity = SensitivityMethod::automatic;
  std::size_t mc_samples = 10000;
  std::size_t threads = 0;
  std::optional<AgingConfig> aging;

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }
};

namespace detail {

template <class T>
T config_value(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::config, std::string("config key '") + key + "' has the wrong type");
  }
}

inline std::vector<AgingTarget> parse_targets(const json& j) {
  std::vector<AgingTarget> out;
  if (!j.is_array()) fail(ErrorKind::config, "aging targets must be an array");
  for (const auto& t : j) {
    if (!t.is_object() || !t.contains("vdd") || !t.contains("years") || !t.contains("relative_shift"))
      fail(ErrorKind::config, "aging target needs vdd, years and relative_shift");
    out.push_back({t["vdd"].get<double>(), t["years"].get<double>(), t["relative_shift"].get<double>()});
  }
  return out;
}

}  // namespace detail

inline RunConfig config_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) fail(ErrorKind::config, "config must be a JSON object");
  static const std::vector<std::string> known{"model",      "dataset",   "variance_csv", "voltages",
                                              "array_n",    "v_bits",    "mse_ub",       "objective_mode",
                                              "energy",     "seed",      "mode",         "out",
                                              "calibration_samples",     "eval_samples", "sensitivity",
                                              "mc_samples", "threads",   "aging"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      fail(ErrorKind::config, "unknown config key '" + k + "'");
  RunConfig c;
  c.base_dir = base_dir;
  using detail::config_value;
  if (j.contains("model")) c.model = config_value<std::string>(j, "model", "");
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    if (!d.is_object() || !d.contains("images") || !d.contains("labels"))
      fail(ErrorKind::config, "dataset needs 'images' and 'labels' paths");
    c.images = d["images"].get<std::string>();
    c.labels = d["labels"].get<std::string>();
  }
  if (j.contains("variance_csv")) c.variance_csv = config_value<std::string>(j, "variance_csv", "");
  c.voltages = config_value(j, "voltages", c.voltages);
  c.array_n = config_value(j, "array_n", c.array_n);
  if (j.contains("v_bits") && !j["v_bits"].is_null()) c.v_bits = config_value<unsigned>(j, "v_bits", 0);
  c.mse_ub = config_value(j, "mse_ub", c.mse_ub);
  c.objective = parse_objective_mode(config_value<std::string>(j, "objective_mode", "linear_v"));
  if (j.contains("energy")) {
    const auto& e = j["energy"];
    c.energy.multiplier_share = config_value(e, "multiplier_share", c.energy.multiplier_share);
    c.energy.weight_by_fan_in = config_value(e, "weight_by_fan_in", c.energy.weight_by_fan_in);
  }
  c.seed = config_value<std::uint64_t>(j, "seed", c.seed);
  c.mode = parse_simulation_mode(config_value<std::string>(j, "mode", "statistical"));
  c.out = config_value<std::string>(j, "out", c.out.string());
  c.calibration_samples = config_value(j, "calibration_samples", c.calibration_samples);
  c.eval_samples = config_value(j, "eval_samples", c.eval_samples);
  const auto sm = parse_sensitivity_method(config_value<std::string>(j, "sensitivity", "automatic"));
  c.sensitivity = sm;
  c.mc_samples = config_value(j, "mc_samples", c.mc_samples);
  c.threads = config_value(j, "threads", c.threads);
  if (j.contains("aging")) {
    const auto& a = j["aging"];
    AgingConfig ac;
    ac.years = config_value(a, "years", ac.years);
    if (a.contains("theta")) ac.theta = config_value(a, "theta", 350.0);
    if (a.contains("duty")) {
      if (a["duty"].is_number()) ac.duty = {a["duty"].get<double>()};
      else ac.duty = config_value(a, "duty", ac.duty);
    }
    if (a.contains("pmos")) ac.pmos = a["pmos"];
    if (a.contains("nmos")) ac.nmos = a["nmos"];
    if (a.contains("targets")) {
      const auto& t = a["targets"];
      if (t.contains("pmos")) ac.pmos_targets = detail::parse_targets(t["pmos"]);
      if (t.contains("nmos")) ac.nmos_targets = detail::parse_targets(t["nmos"]);
    }
    ac.pmos_vth0 = config_value(a, "pmos_vth0", ac.pmos_vth0);
    ac.nmos_vth0 = config_value(a, "nmos_vth0", ac.nmos_vth0);
    c.aging = ac;
  }

  if (c.voltages.empty()) fail(ErrorKind::config, "voltages must not be empty");
  if (c.array_n == 0) fail(ErrorKind::config, "array_n must be positive");
  if (c.v_bits && (std::size_t{1} << *c.v_bits) < c.voltages.size())
    fail(ErrorKind::config, "v_bits " + std::to_string(*c.v_bits) + " cannot encode " +
                                std::to_string(c.voltages.size()) + " voltage levels");
  for (double b : c.mse_ub)
    if (!(b > 0.0)) fail(ErrorKind::config, "mse_ub values must be positive");
  if (!(c.energy.multiplier_share >= 0.0 && c.energy.multiplier_share <= 1.0))
    fail(ErrorKind::config, "energy.multiplier_share must lie in [0, 1]");
  if (c.calibration_samples == 0) fail(ErrorKind::config, "calibration_samples must be positive");
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::config, path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

/// Fully resolved configuration, echoed into every output directory.
inline json config_to_json(const RunConfig& c) {
  auto opt_path = [&](const std::optional<fs::path>& p) {
    return p ? json(fs::weakly_canonical(c.resolve(*p)).string()) : json(nullptr);
  };
  json j{{"model", opt_path(c.model)},
         {"dataset", {{"images", opt_path(c.images)}, {"labels", opt_path(c.labels)}}},
         {"variance_csv", opt_path(c.variance_csv)},
         {"voltages", c.voltages},
         {"array_n", c.array_n},
         {"v_bits", c.v_bits ? json(*c.v_bits) : json(voltage_bits(c.voltages.size()))},
         {"mse_ub", c.mse_ub},
         {"objective_mode", std::string(to_string(c.objective))},
         {"energy", {{"multiplier_share", c.energy.multiplier_share}, {"weight_by_fan_in", c.energy.weight_by_fan_in}}},
         {"seed", c.seed},
         {"mode", std::string(to_string(c.mode))},
         {"calibration_samples", c.calibration_samples},
         {"eval_samples", c.eval_samples},
         {"sensitivity", std::string(to_string(c.sensitivity))},
         {"mc_samples", c.mc_samples},
         {"threads", c.threads}};
  if (c.aging) {
    const auto& a = *c.aging;
    auto targets = [](const std::vector<AgingTarget>& ts) {
      json arr = json::array();
      for (const auto& t : ts) arr.push_back({{"vdd", t.v_dd}, {"years", t.years}, {"relative_shift", t.relative_shift}});
      return arr;
    };
    j["aging"] = {{"years", a.years},
                  {"theta", a.theta ? json(*a.theta) : json(nullptr)},
                  {"duty", a.duty},
                  {"pmos", a.pmos ? *a.pmos : json(nullptr)},
                  {"nmos", a.nmos ? *a.nmos : json(nullptr)},
                  {"targets", {{"pmos", targets(a.pmos_targets)}, {"nmos", targets(a.nmos_targets)}}},
                  {"pmos_vth0", a.pmos_vth0},
                  {"nmos_vth0", a.nmos_vth0}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Output helpers

/// Write via a sibling temporary and rename, so readers never see partial files.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + tmp.string());
    out << content;
    if (!out) fail(ErrorKind::io, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_json_atomic(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

template <class Fn>
void write_stream_atomic(const fs::path& path, Fn&& fn) {
  std::ostringstream os;
  os << std::setprecision(10);
  fn(os);
  write_file_atomic(path, os.str());
}

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return 2;
    case ErrorKind::too_large:
    case ErrorKind::internal: return 4;
    default: return 3;
  }
}

inline void log_line(const std::string& msg) {
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[xtpu] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Pipeline stages

inline ErrorModelTable load_table(const RunConfig& c) {
  if (!c.variance_csv) fail(ErrorKind::config, "config lacks 'variance_csv'");
  return fit_linear_scaling(load_variance_table(c.resolve(*c.variance_csv), c.voltages));
}

inline QuantizedModel load_config_model(const RunConfig& c) {
  if (!c.model) fail(ErrorKind::config, "config lacks 'model'");
  return load_model(c.resolve(*c.model));
}

inline Dataset load_config_dataset(const RunConfig& c) {
  if (!c.images || !c.labels) fail(ErrorKind::config, "config lacks 'dataset'");
  return load_mnist_idx(c.resolve(*c.images), c.resolve(*c.labels));
}

/// Everything the assign/simulate/sweep stages share.
struct PipelineContext {
  RunConfig config;
  QuantizedModel model;
  Dataset eval;
  Dataset calibration;
  ErrorModelTable table;
  double baseline_mse = 0.0;
  SensitivityMap map;
};

inline SensitivityParams sensitivity_params(const RunConfig& c, const ErrorModelTable& t) {
  SensitivityParams p;
  p.mc_samples = c.mc_samples;
  p.calibration_samples = c.calibration_samples;
  double max_var = 0.0;
  for (const auto& lv : t.levels()) max_var = std::max(max_var, t.level(lv.code).single_pe_variance);
  p.injected_std_per_pe = max_var > 0.0 ? std::sqrt(max_var) : 1.0;
  p.threads = c.threads;
  return p;
}

inline PipelineContext prepare(const RunConfig& c) {
  PipelineContext ctx{c, load_config_model(c), load_config_dataset(c), {}, load_table(c), 0.0, {}};
  if (ctx.eval.input_size != ctx.model.input_size)
    fail(ErrorKind::dimension, "dataset width " + std::to_string(ctx.eval.input_size) + " != model input_size " +
                                   std::to_string(ctx.model.input_size));
  ctx.eval = ctx.eval.head(c.eval_samples);
  ctx.calibration = ctx.eval.head(c.calibration_samples);
  ctx.baseline_mse = baseline_mse(ctx.model, ctx.calibration);
  ctx.map = sensitivity_map(ctx.model, ctx.calibration, c.sensitivity, sensitivity_params(c, ctx.table), c.seed);
  return ctx;
}

inline SimulationOptions simulation_options(const RunConfig& c, std::uint64_t seed, std::optional<double> budget,
                                            std::size_t threads) {
  SimulationOptions o;
  o.mode = c.mode;
  o.array_n = c.array_n;
  o.v_bits = c.v_bits;
  o.seed = seed;
  o.energy = c.energy;
  o.budget = budget;
  o.threads = threads;
  return o;
}

struct AssignOutcome {
  AssignmentInstance instance;
  VoltageAssignment assignment;
  EnergyReport energy;
  double solver_seconds = 0.0;
};

inline AssignOutcome assign_for(const PipelineContext& ctx, double mse_ub) {
  AssignOutcome r;
  r.instance = build_instance(ctx.map, ctx.table, mse_ub, ctx.baseline_mse, ctx.config.objective);
  const auto t0 = std::chrono::steady_clock::now();
  r.assignment = solve_assignment(r.instance);
  r.solver_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EnergyParams ep = ctx.config.energy;
  ep.v_nominal = ctx.table.nominal().volts;
  r.energy = energy_report(r.assignment, r.instance, ep);
  return r;
}

inline json assignment_summary(const AssignOutcome& a, double mse_ub) {
  std::vector<int> histogram(a.instance.level_count(), 0);
  for (int code : a.assignment.codes) ++histogram[static_cast<std::size_t>(code)];
  return {{"mse_ub", mse_ub},
          {"budget", std::isfinite(a.instance.budget) ? json(a.instance.budget) : json("inf")},
          {"objective", a.assignment.objective_value},
          {"predicted_mse", a.assignment.predicted_mse},
          {"feasible", a.assignment.feasible},
          {"energy_saving", a.energy.saving},
          {"method", a.assignment.method},
          {"level_histogram", histogram}};
}

/// Writes assignment.csv, weight_memory.txt and assignment.json into `dir`.
inline void write_assignment_files(const PipelineContext& ctx, const AssignOutcome& a, double mse_ub,
                                   const fs::path& dir) {
  write_stream_atomic(dir / "assignment.csv",
                      [&](std::ostream& os) { write_assignment_csv(os, a.assignment.codes, ctx.table.levels()); });
  const unsigned vb = ctx.config.v_bits.value_or(voltage_bits(ctx.table.size()));
  const auto mem = encode_weight_memory(ctx.model, a.assignment.codes, ctx.config.array_n, vb);
  write_stream_atomic(dir / "weight_memory.txt", [&](std::ostream& os) { write_memory_dump(os, mem); });
  json j = assignment_summary(a, mse_ub);
  j["baseline_mse"] = ctx.baseline_mse;
  write_json_atomic(dir / "assignment.json", j);
}

inline void echo_config(const RunConfig& c) { write_json_atomic(c.out / "resolved_config.json", config_to_json(c)); }

inline ErrorModelTable cmd_calibrate(const RunConfig& c) {
  const auto table = load_table(c);
  echo_config(c);
  write_json_atomic(c.out / "error_model.json", table_to_json(table));
  return table;
}

inline SensitivityMap cmd_sensitivity(const RunConfig& c) {
  const auto ctx = prepare(c);
  echo_config(c);
  write_stream_atomic(c.out / "sensitivity.csv", [&](std::ostream& os) { write_sensitivity_csv(os, ctx.map); });
  write_json_atomic(c.out / "sensitivity.json", {{"baseline_mse", ctx.baseline_mse},
                                                 {"calibration_samples", ctx.calibration.size()},
                                                 {"neurons", ctx.map.size()},
                                                 {"outputs", ctx.map.outputs}});
  return ctx.map;
}

inline AssignOutcome cmd_assign(const RunConfig& c, double mse_ub) {
  const auto ctx = prepare(c);
  echo_config(c);
  auto a = assign_for(ctx, mse_ub);
  log_line("solved " + std::to_string(a.instance.neurons()) + " neurons with " + a.assignment.method + " in " +
           std::to_string(a.solver_seconds) + " s");
  write_assignment_files(ctx, a, mse_ub, c.out);
  write_json_atomic(c.out / "timings.json", {{"solver_seconds", a.solver_seconds}});
  return a;
}

/// Simulate either a stored assignment CSV or a fresh one for `mse_ub`.
inline SimulationReport cmd_simulate(const RunConfig& c, std::optional<fs::path> assignment_csv, double mse_ub) {
  const auto ctx = prepare(c);
  echo_config(c);
  std::vector<int> codes;
  std::optional<double> budget;
  if (assignment_csv) {
    std::ifstream in(*assignment_csv);
    if (!in) fail(ErrorKind::io, "cannot open " + assignment_csv->string());
    codes = read_assignment_csv(in, ctx.table.size());
    if (codes.size() != ctx.model.neuron_count()) fail(ErrorKind::dimension, "assignment does not match the model");
  } else {
    const auto a = assign_for(ctx, mse_ub);
    codes = a.assignment.codes;
    budget = a.instance.budget;
    write_assignment_files(ctx, a, mse_ub, c.out);
  }
  const auto rep = simulate_inference(ctx.model, codes, ctx.eval, ctx.table, simulation_options(c, c.seed, budget, c.threads));
  json j = report_to_json(rep);
  j["baseline_mse"] = ctx.baseline_mse;
  write_json_atomic(c.out / "simulation.json", j);
  return rep;
}

struct SweepRow {
  double mse_ub = 0.0;
  double budget = 0.0;
  double objective = 0.0;
  double predicted_mse = 0.0;
  double empirical_mse = 0.0;
  double accuracy = 0.0;
  double accuracy_drop = 0.0;
  double energy_saving = 0.0;
  double violation = 0.0;
  double solver_seconds = 0.0;
  std::string method;
};

/// Assign and simulate every bound. Points run concurrently, each with its
/// own seed, and write their files as soon as they finish.
inline std::vector<SweepRow> cmd_sweep(const RunConfig& c) {
  if (c.mse_ub.empty()) fail(ErrorKind::config, "mse_ub list is empty");
  const auto ctx = prepare(c);
  echo_config(c);
  std::vector<double> bounds = c.mse_ub;
  std::sort(bounds.begin(), bounds.end());
  std::vector<SweepRow> rows(bounds.size());
  detail::parallel_for(bounds.size(), c.threads, [&](std::size_t i) {
    const auto a = assign_for(ctx, bounds[i]);
    const std::uint64_t point_seed = splitmix64(c.seed ^ splitmix64(1000 + i));
    const auto rep = simulate_inference(ctx.model, a.assignment.codes, ctx.eval, ctx.table,
                                        simulation_options(c, point_seed, a.instance.budget, 1));
    SweepRow& r = rows[i];
    r.mse_ub = bounds[i];
    r.budget = a.instance.budget;
    r.objective = a.assignment.objective_value;
    r.predicted_mse = a.assignment.predicted_mse;
    r.empirical_mse = rep.empirical_mse;
    r.accuracy = rep.accuracy.value_or(0.0);
    r.accuracy_drop = rep.nominal_accuracy.value_or(0.0) - r.accuracy;
    r.energy_saving = rep.energy_saving;
    r.violation = rep.violation;
    r.solver_seconds = a.solver_seconds;
    r.method = a.assignment.method;
    std::ostringstream name;
    name << "point_" << std::setw(2) << std::setfill('0') << i;
    const fs::path dir = c.out / name.str();
    write_assignment_files(ctx, a, bounds[i], dir);
    json j = report_to_json(rep);
    j["mse_ub"] = bounds[i];
    write_json_atomic(dir / "simulation.json", j);
    log_line("mse_ub " + std::to_string(bounds[i]) + ": saving " + std::to_string(r.energy_saving) + ", drop " +
             std::to_string(r.accuracy_drop) + ", solver " + std::to_string(r.solver_seconds) + " s");
  });

  write_stream_atomic(c.out / "sweep.csv", [&](std::ostream& os) {
    os << "mse_ub,budget,objective,predicted_mse,empirical_mse,accuracy,accuracy_drop,energy_saving,violation,method\n";
    for (const auto& r : rows)
      os << r.mse_ub << ',' << r.budget << ',' << r.objective << ',' << r.predicted_mse << ',' << r.empirical_mse
         << ',' << r.accuracy << ',' << r.accuracy_drop << ',' << r.energy_saving << ',' << r.violation << ','
         << r.method << '\n';
  });
  double mean_violation = 0.0;
  bool monotone = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    mean_violation += rows[i].violation / static_cast<double>(rows.size());
    if (i > 0 && rows[i].energy_saving < rows[i - 1].energy_saving - 1e-12) monotone = false;
  }
  write_json_atomic(c.out / "sweep.json", {{"points", rows.size()},
                                           {"baseline_mse", ctx.baseline_mse},
                                           {"mean_violation", mean_violation},
                                           {"saving_monotone", monotone},
                                           {"seed", c.seed}});
  json timing = json::array();
  for (const auto& r : rows) timing.push_back({{"mse_ub", r.mse_ub}, {"solver_seconds", r.solver_seconds}});
  write_json_atomic(c.out / "timings.json", timing);
  return rows;
}

inline std::vector<AgingReport> cmd_aging(const RunConfig& c) {
  if (!c.aging) fail(ErrorKind::config, "config lacks an 'aging' section (give device params or calibration targets)");
  const AgingConfig& a = *c.aging;
  const auto levels = make_levels(c.voltages);
  auto resolve = [&](Device d, const std::optional<json>& given, const std::vector<AgingTarget>& targets,
                     double vth0) -> std::optional<std::pair<AgingParams, double>> {
    AgingParams base;
    base.device = d;
    base.vth0 = vth0;
    if (given) base = aging_params_from_json(*given, base);
    if (!targets.empty()) {
      const auto cal = calibrate_aging(targets, base);
      return std::pair{cal.params, cal.max_relative_error};
    }
    if (given) return std::pair{base, 0.0};
    return std::nullopt;
  };
  const auto pmos = resolve(Device::pmos, a.pmos, a.pmos_targets, a.pmos_vth0);
  const auto nmos = resolve(Device::nmos, a.nmos, a.nmos_targets, a.nmos_vth0);
  if (!pmos && !nmos)
    fail(ErrorKind::config, "aging needs 'pmos'/'nmos' params or 'targets' for at least one device kind");
  echo_config(c);
  std::vector<AgingReport> reports;
  json summary = json::array();
  for (const auto& dev : {pmos, nmos}) {
    if (!dev) continue;
    const auto& [p, residual] = *dev;
    reports.push_back(lifetime_report(p, levels, a.years, a.theta.value_or(p.theta), a.duty));
    json s = aging_summary_json(reports.back());
    s["params"] = aging_params_to_json(p);
    s["calibration_max_relative_error"] = residual;
    summary.push_back(std::move(s));
  }
  write_stream_atomic(c.out / "aging.csv", [&](std::ostream& os) { write_aging_csv(os, reports); });
  write_json_atomic(c.out / "aging.json", summary);
  return reports;
}

}  // namespace xtpu
