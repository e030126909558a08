// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "helpers.hpp"
#include "instances.hpp"
#include "xtpu/pipeline.hpp"

using namespace xtpu;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using testing_util::data_path;

ErrorModelTable variance_table() {
  return fit_linear_scaling(load_variance_table(data_path("pe_variance.csv"), {0.5, 0.6, 0.7, 0.8}));
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Column error variance grows as k * sigma^2.
Outcome variance_additivity() {
  const auto table = variance_table();
  Rng rng(101);
  std::uniform_int_distribution<int> wd(-128, 127), ad(0, 255);
  const std::size_t trials = 100000;
  double worst = 0.0;
  for (std::size_t k : {1u, 4u, 16u, 64u}) {
    const std::size_t cols = 3;  // one column per non-nominal level
    std::vector<std::int8_t> w(k * cols);
    for (auto& v : w) v = static_cast<std::int8_t>(wd(rng));
    WeightMemory mem;
    mem.array_n = 256;
    mem.v_bits = 2;
    const std::vector<int> codes{0, 1, 2};
    encode_matrix(mem, 0, w, k, cols, codes);
    std::vector<std::int32_t> acts(trials * k);
    for (auto& a : acts) a = ad(rng);
    const auto res = simulate_mm(mem, acts, table, rng);
    for (std::size_t c = 0; c < cols; ++c) {
      std::vector<double> ref(trials), err(trials);
      for (std::size_t b = 0; b < trials; ++b) {
        std::int64_t exact = 0;
        for (std::size_t r = 0; r < k; ++r) exact += static_cast<std::int64_t>(w[c * k + r]) * acts[b * k + r];
        ref[b] = static_cast<double>(exact);
        err[b] = static_cast<double>(res.outputs[b * cols + c]);
      }
      const double expected = static_cast<double>(k) * table.level(codes[c]).single_pe_variance;
      worst = std::max(worst, std::abs(output_error_variance(ref, err) / expected - 1.0));
    }
  }
  return {worst <= 0.05, fmt("worst relative deviation %.4f over 12 (level, k) cells, %zu trials each", worst, trials)};
}

// 2. Exact solver equals brute force, including tie-breaking.
Outcome solver_exactness() {
  Rng rng(202);
  std::uniform_int_distribution<std::size_t> nd(1, 12), ld(2, 4);
  const testing_util::CostKind kinds[] = {testing_util::CostKind::linear_volts, testing_util::CostKind::quadratic_volts,
                                          testing_util::CostKind::small_integers, testing_util::CostKind::random_reals};
  int mismatches = 0;
  for (int i = 0; i < 200; ++i) {
    const auto inst = testing_util::random_instance(rng, nd(rng), ld(rng), kinds[i % 4], i % 3 == 0);
    const auto bf = brute_force_assignment(inst);
    const auto a = solve_assignment(inst);
    if (a.codes != bf.codes || a.objective_value != bf.objective_value) ++mismatches;
  }
  return {mismatches == 0, fmt("%d of 200 instances differ from brute force", mismatches)};
}

// 3. Budget 0, infinite budget, and feasibility of every solution.
Outcome boundary_behavior() {
  Rng rng(303);
  std::uniform_int_distribution<std::size_t> nd(1, 40), ld(2, 5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int bad = 0, nominal_instances = 0, zero_weight_levels = 0;
  for (int i = 0; i < 1000; ++i) {
    auto inst = testing_util::random_instance(rng, nd(rng), ld(rng), testing_util::CostKind::linear_volts, false);
    const auto L = inst.level_count();
    const auto a = solve_assignment(inst);
    if (!a.feasible || a.predicted_mse > inst.budget * (1.0 + 1e-12)) ++bad;

    // Budget 0 admits only zero-error levels: nominal, unless a cheaper level
    // of this neuron also has zero weight. Costs rise with voltage here.
    inst.budget = 0.0;
    const auto z = solve_assignment(inst);
    bool all_nominal = true;
    for (std::size_t n = 0; n < inst.neurons(); ++n) {
      std::size_t expected = 0;
      while (inst.w(n, expected) > 0.0) ++expected;
      if (z.codes[n] != static_cast<int>(expected)) ++bad;
      all_nominal = all_nominal && expected == L - 1;
      zero_weight_levels += expected != L - 1;
    }
    EnergyParams ep;
    ep.v_nominal = inst.levels.back().volts;
    if (all_nominal) {
      ++nominal_instances;
      if (energy_report(z, inst, ep).saving != 0.0) ++bad;
    }

    inst.budget = std::numeric_limits<double>::infinity();
    for (int c : solve_assignment(inst).codes)
      if (c != 0) ++bad;
  }
  return {bad == 0, fmt("%d violations over 1000 instances x 3 budgets (%d all-nominal at budget 0, %d neurons with a "
                        "free lower level)",
                        bad, nominal_instances, zero_weight_levels)};
}

struct Reference {
  QuantizedModel model;
  Dataset data;
  ErrorModelTable table;
};

const Reference& reference() {
  static const Reference r{load_model(data_path("models/mnist_fc_784_128_10.json")),
                           load_mnist_idx(data_path("mnist/test-images-idx3-ubyte"),
                                          data_path("mnist/test-labels-idx1-ubyte")),
                           variance_table()};
  return r;
}

// 4. Full-size instance of the reference model solves to optimality quickly.
Outcome solver_scale() {
  const auto& ref = reference();
  const auto calib = ref.data.head(256);
  const auto map = sensitivity_map(ref.model, calib, SensitivityMethod::automatic, {}, 1);
  const double base = baseline_mse(ref.model, calib);
  double worst = 0.0;
  std::string methods;
  bool ok = map.size() == 138;
  for (double rel : {0.01, 0.1, 1.0, 10.0}) {
    const auto inst = build_instance(map, ref.table, rel, base, ObjectiveMode::linear_v);
    const auto t0 = std::chrono::steady_clock::now();
    const auto a = solve_assignment(inst);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    worst = std::max(worst, s);
    ok = ok && a.feasible && (a.method == "dp" || a.method == "branch_and_bound");
    methods += (methods.empty() ? "" : ",") + a.method;
  }
  ok = ok && worst < 60.0;
  return {ok, fmt("%zu neurons x 4 levels, slowest of 4 bounds %.3f s (%s)", map.size(), worst, methods.c_str())};
}

// 5. Simulated MSE stays within the bound on the 16x16 matmul benchmark.
Outcome violation_rate() {
  const auto table = variance_table();
  const std::size_t n = 16, samples = 20000;
  Rng rng(505);
  std::uniform_real_distribution<double> wu(-1.0, 1.0), au(0.0, 1.0);
  std::vector<double> wf(n * n), af(samples * n);
  for (auto& v : wf) v = wu(rng);
  for (auto& v : af) v = au(rng);
  std::vector<std::int8_t> wq(n * n);
  std::vector<std::int32_t> aq(samples * n);
  for (std::size_t i = 0; i < wf.size(); ++i) wq[i] = static_cast<std::int8_t>(std::lround(wf[i] * 127.0));
  for (std::size_t i = 0; i < af.size(); ++i) aq[i] = static_cast<std::int32_t>(std::lround(af[i] * 255.0));

  // Baseline: quantization error of the nominal int8 pipeline against float,
  // in accumulator LSBs, summed over the 16 outputs.
  std::vector<double> exact(samples * n), ideal(samples * n);
  for (std::size_t b = 0; b < samples; ++b)
    for (std::size_t c = 0; c < n; ++c) {
      double fs_ = 0.0;
      std::int64_t is = 0;
      for (std::size_t r = 0; r < n; ++r) {
        fs_ += wf[c * n + r] * af[b * n + r];
        is += static_cast<std::int64_t>(wq[c * n + r]) * aq[b * n + r];
      }
      ideal[b * n + c] = fs_ * 127.0 * 255.0;
      exact[b * n + c] = static_cast<double>(is);
    }
  const double base = output_error_variance(ideal, exact, n);

  SensitivityMap map;
  map.outputs = n;
  for (std::size_t c = 0; c < n; ++c) {
    map.neurons.push_back({0, c});
    map.fan_in.push_back(n);
    map.method.push_back(SensitivityMethod::analytic);
    for (std::size_t o = 0; o < n; ++o) map.es.push_back(o == c ? 1.0 : 0.0);
  }

  const double bounds[] = {0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0};
  double mean_violation = 0.0;
  std::ostringstream pts;
  for (double rel : bounds) {
    const auto inst = build_instance(map, table, rel, base, ObjectiveMode::linear_v);
    const auto a = solve_assignment(inst);
    WeightMemory mem;
    mem.array_n = n;
    mem.v_bits = 2;
    encode_matrix(mem, 0, wq, n, n, a.codes);
    const auto res = simulate_mm(mem, aq, table, rng);
    std::vector<double> noisy(res.outputs.begin(), res.outputs.end());
    const double mse = output_error_variance(exact, noisy, n);
    const double v = inst.budget > 0.0 ? std::max(0.0, mse / inst.budget - 1.0) : (mse > 0.0 ? 1e9 : 0.0);
    mean_violation += v / std::size(bounds);
    std::size_t scaled = 0;
    for (int code : a.codes) scaled += code != 3;
    pts << ' ' << rel << ':' << scaled << "col";
    if (a.predicted_mse > 0.0) pts << fmt("(emp/pred %.3f)", mse / a.predicted_mse);
    pts << fmt("/%.4f", v);
  }
  return {mean_violation <= 0.05,
          fmt("baseline %.0f LSB^2, mean violation %.4f; bound:scaled/violation", base, mean_violation) + pts.str()};
}

// 6. Energy/accuracy trade-off of the reference model over the default sweep.
Outcome headline_point() {
  auto c = load_config(fs::path(XTPU_SOURCE_DIR) / "configs/default.json");
  c.out = fs::temp_directory_path() / ("xtpu_acceptance_sweep_" + std::to_string(std::random_device{}()));
  const auto rows = cmd_sweep(c);
  fs::remove_all(c.out);
  bool hit = false, monotone = true;
  std::ostringstream pts;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.energy_saving >= 0.25 && r.accuracy_drop <= 0.02) hit = true;
    if (i > 0 && r.energy_saving < rows[i - 1].energy_saving - 1e-12) monotone = false;
    pts << fmt(" %g:%.3f/%.4f", r.mse_ub, r.energy_saving, r.accuracy_drop);
  }
  return {hit && monotone, std::string(hit ? "" : "no point with saving>=25% and drop<=2%; ") +
                               (monotone ? "saving monotone;" : "saving NOT monotone;") +
                               " bound:saving/drop" + pts.str()};
}

// 7. Output neurons have unit sensitivity, hidden neurons less; MC matches analytic.
Outcome sensitivity_structure() {
  const auto& ref = reference();
  const auto map = sensitivity_map(ref.model, ref.data.head(256), SensitivityMethod::automatic, {}, 1);
  double hidden = 0.0, output = 0.0, worst_out = 0.0;
  std::size_t nh = 0, no = 0;
  for (std::size_t n = 0; n < map.size(); ++n) {
    if (map.neurons[n].layer + 1 == ref.model.layers.size()) {
      output += map.l2(n);
      worst_out = std::max(worst_out, std::abs(map.l2(n) - 1.0));
      ++no;
    } else {
      hidden += map.l2(n);
      ++nh;
    }
  }
  hidden /= static_cast<double>(nh);
  output /= static_cast<double>(no);

  Rng rng(707);
  double worst_mc = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = testing_util::random_linear_model({3, 4, 2}, rng);
    const auto d = testing_util::random_dataset(256, 3, 2, rng);
    const SensitivityProbe probe(m, d);
    for (std::size_t id = 0; id < m.neuron_count(); ++id) {
      const NeuronRef nr = m.neuron(id);
      const double sd =
          nr.layer + 1 == m.layers.size() ? 100.0 : 6.0 * m.layers[1].activation_scale / m.layers[0].accumulator_lsb();
      const auto an = error_sensitivity_analytic(m, nr);
      const auto mc = error_sensitivity_mc(probe, m, nr, sd, 20000, rng);
      for (std::size_t o = 0; o < an.size(); ++o)
        if (an[o] > 1e-9) worst_mc = std::max(worst_mc, std::abs(mc[o] / an[o] - 1.0));
    }
  }
  const bool ok = worst_out <= 0.05 && hidden < output && worst_mc <= 0.05;
  return {ok, fmt("output ES max |1-ES| %.2e, mean hidden ES %.4f < mean output ES %.4f, MC vs analytic worst %.4f",
                  worst_out, hidden, output, worst_mc)};
}

// 8. Cycle counts follow the closed forms.
Outcome cycle_model() {
  int bad = 0;
  for (std::size_t n = 1; n <= 256; ++n) {
    if (cycle_count(256, n, false) != CycleCount{n, 2 * n}) ++bad;
    if (cycle_count(256, n, true) != CycleCount{2 * n, 3 * n}) ++bad;
  }
  return {bad == 0, fmt("%d mismatches over n = 1..256", bad)};
}

// 9. Aging calibration, monotonicity, and the uniform-mix lifetime comparison.
Outcome aging_calibration() {
  const std::vector<AgingTarget> targets{{0.8, 10.0, 0.237}, {0.5, 10.0, 0.0021}};
  const auto cal = calibrate_aging(targets, AgingParams{});
  const double hi = delta_vth_years(cal.params, 0.8, 10.0) / cal.params.vth0;
  const double lo = delta_vth_years(cal.params, 0.5, 10.0) / cal.params.vth0;
  const bool fit = std::abs(hi / 0.237 - 1.0) <= 0.005 && std::abs(lo / 0.0021 - 1.0) <= 0.005;

  Rng rng(909);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int bad = 0;
  for (int i = 0; i < 10000; ++i) {
    AgingParams p;
    p.A = 1e-4 + 1e-2 * u(rng);
    p.kappa = -200.0 + 400.0 * u(rng);
    p.alpha_t = 0.05 + 0.4 * u(rng);
    p.gamma = 0.5 + 5.0 * u(rng);
    p.beta = 0.05 + 0.5 * u(rng);
    p.T_inv = 0.5 + 2.0 * u(rng);
    p.vth0 = 0.2 + 0.2 * u(rng);
    const double v = p.vth0 + 0.05 + 0.5 * u(rng), dv = 0.01 + 0.1 * u(rng);
    const double t = 1e3 + 1e8 * u(rng), theta = 250.0 + 150.0 * u(rng), f = 0.1 + 0.8 * u(rng);
    const double b = delta_vth(p, v, t, theta, f);
    if (!(delta_vth(p, v + dv, t, theta, f) > b)) ++bad;
    if (!(delta_vth(p, v, 1.5 * t, theta, f) > b)) ++bad;
    if (!(delta_vth(p, v, t, theta, std::min(1.0, f + 0.1)) > b)) ++bad;
    const double alpha = 1.0 + u(rng);
    if (!(delay_factor(v + dv, p.vth0, alpha) < delay_factor(v, p.vth0, alpha))) ++bad;
    if (!(delay_factor(v, p.vth0 + 0.01, alpha) > delay_factor(v, p.vth0, alpha))) ++bad;
  }
  const auto rep = lifetime_report(cal.params, make_levels({0.5, 0.6, 0.7, 0.8}), 10.0, cal.params.theta);
  const bool mix = rep.mixed_delay_increase_pct < rep.nominal_delay_increase_pct;
  return {fit && bad == 0 && mix,
          fmt("shift %.4f%% @0.8V, %.4f%% @0.5V; %d monotonicity failures; aged delay nominal +%.2f%% vs uniform "
              "mix +%.2f%% (gain %.1f%%)",
              100 * hi, 100 * lo, bad, rep.nominal_delay_increase_pct, rep.mixed_delay_increase_pct,
              100 * rep.lifetime_gain)};
}

// 10. Weight-word round trip and bit-exact all-nominal matmul.
Outcome encode_and_exact_mode() {
  int bad = 0;
  for (int code = 0; code < 4; ++code)
    for (int w = -128; w <= 127; ++w)
      if (decode_voltage(encode_word(w, code, 2), 2) != DecodedWord{w, code}) ++bad;
  const auto table = variance_table();
  Rng rng(1010);
  std::uniform_int_distribution<int> wd(-128, 127), ad(0, 255);
  int mismatched = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::int8_t> w(256);
    for (auto& v : w) v = static_cast<std::int8_t>(wd(rng));
    std::vector<std::int32_t> a(8 * 16);
    for (auto& v : a) v = ad(rng);
    WeightMemory mem;
    mem.array_n = 16;
    mem.v_bits = 2;
    encode_matrix(mem, 0, w, 16, 16, std::vector<int>(16, 3));
    const auto res = simulate_mm(mem, a, table, rng);
    for (std::size_t b = 0; b < 8; ++b)
      for (std::size_t c = 0; c < 16; ++c) {
        std::int64_t s = 0;
        for (std::size_t r = 0; r < 16; ++r) s += static_cast<std::int64_t>(w[c * 16 + r]) * a[b * 16 + r];
        if (res.outputs[b * 16 + c] != s) ++mismatched;
      }
  }
  return {bad == 0 && mismatched == 0,
          fmt("%d round-trip failures over 1024 words, %d output mismatches over 100 matmuls", bad, mismatched)};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"variance additivity", variance_additivity},
      {"solver exactness", solver_exactness},
      {"boundary behavior", boundary_behavior},
      {"solver scale", solver_scale},
      {"budget violation rate", violation_rate},
      {"energy/accuracy operating point", headline_point},
      {"sensitivity structure", sensitivity_structure},
      {"cycle model", cycle_model},
      {"aging calibration", aging_calibration},
      {"encode/decode and exact mode", encode_and_exact_mode},
  };
  int failed = 0, id = 0;
  for (const auto& [name, run] : criteria) {
    ++id;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "CRITERION " << id << ' ' << (o.pass ? "PASS" : "FAIL") << " [" << name << "] " << o.detail
              << fmt(" (%.1f s)", s) << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
