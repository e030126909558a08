#include <cstdint>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "xtpu/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Per-neuron voltage overscaling for systolic DNN accelerators"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;
  double mse_ub = 2.0;
  std::optional<std::string> assignment;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Master seed (overrides the config)");
    sub->add_option("--out", out, "Output directory (overrides the config)");
    sub->add_option("--mode", mode, "Simulation fidelity: systolic or statistical");
  };
  auto* calibrate = app.add_subcommand("calibrate", "Fit the per-PE error model from the variance table");
  auto* sensitivity = app.add_subcommand("sensitivity", "Compute per-neuron error sensitivities");
  auto* assign = app.add_subcommand("assign", "Solve the voltage assignment for one MSE bound");
  auto* simulate = app.add_subcommand("simulate", "Simulate an assignment and report MSE, accuracy, energy");
  auto* sweep = app.add_subcommand("sweep", "Assign and simulate every configured MSE bound");
  auto* aging = app.add_subcommand("aging", "Threshold-shift and delay report per voltage level");
  for (auto* s : {calibrate, sensitivity, assign, simulate, sweep, aging}) common(s);
  assign->add_option("--mse-ub", mse_ub, "Relative MSE increase bound")->check(CLI::NonNegativeNumber);
  simulate->add_option("--mse-ub", mse_ub, "Relative MSE increase bound")->check(CLI::NonNegativeNumber);
  simulate->add_option("--assignment", assignment, "Existing assignment CSV")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto cfg = xtpu::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    else cfg.out = cfg.resolve(cfg.out);
    if (mode) cfg.mode = xtpu::parse_simulation_mode(*mode);

    if (calibrate->parsed()) {
      const auto t = xtpu::cmd_calibrate(cfg);
      for (const auto& lv : t.levels())
        std::cout << lv.volts << " V: sigma^2 per PE = " << t.level(lv.code).single_pe_variance << '\n';
    } else if (sensitivity->parsed()) {
      const auto map = xtpu::cmd_sensitivity(cfg);
      std::cout << "sensitivities for " << map.size() << " neurons written to " << cfg.out << '\n';
    } else if (assign->parsed()) {
      const auto a = xtpu::cmd_assign(cfg, mse_ub);
      std::cout << "objective " << a.assignment.objective_value << ", predicted MSE " << a.assignment.predicted_mse
                << " (budget " << a.instance.budget << "), energy saving " << a.energy.saving << '\n';
    } else if (simulate->parsed()) {
      std::optional<std::filesystem::path> csv;
      if (assignment) csv = *assignment;
      const auto r = xtpu::cmd_simulate(cfg, csv, mse_ub);
      std::cout << "empirical MSE " << r.empirical_mse << ", energy saving " << r.energy_saving;
      if (r.accuracy) std::cout << ", accuracy " << *r.accuracy << " (nominal " << r.nominal_accuracy.value_or(0) << ')';
      std::cout << '\n';
    } else if (sweep->parsed()) {
      const auto rows = xtpu::cmd_sweep(cfg);
      std::cout << "mse_ub,energy_saving,accuracy_drop,violation\n";
      for (const auto& r : rows)
        std::cout << r.mse_ub << ',' << r.energy_saving << ',' << r.accuracy_drop << ',' << r.violation << '\n';
    } else if (aging->parsed()) {
      for (const auto& r : xtpu::cmd_aging(cfg))
        std::cout << xtpu::to_string(r.device) << ": nominal delay +" << r.nominal_delay_increase_pct
                  << "%, uniform mix +" << r.mixed_delay_increase_pct << "%, gain " << r.lifetime_gain << '\n';
    }
  } catch (const xtpu::Error& e) {
    std::cerr << "error (" << xtpu::to_string(e.kind()) << "): " << e.what() << '\n';
    return xtpu::exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error (io): " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error (internal): " << e.what() << '\n';
    return 4;
  }
  return 0;
}
