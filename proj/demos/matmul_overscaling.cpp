// Overscale the columns of one 16x16 int8 matmul under a range of MSE bounds
// and compare the predicted error with what the systolic simulation produces.

#include <cstdio>
#include <random>

#include "xtpu/xtpu.hpp"

using namespace xtpu;

int main() {
  const auto table = fit_linear_scaling(
      load_variance_table(std::string(XTPU_DATA_DIR) + "/pe_variance.csv", {0.5, 0.6, 0.7, 0.8}));
  const std::size_t n = 16, batch = 10000;
  Rng rng(42);
  std::uniform_int_distribution<int> wd(-128, 127), ad(0, 255);
  std::vector<std::int8_t> w(n * n);
  for (auto& v : w) v = static_cast<std::int8_t>(wd(rng));
  std::vector<std::int32_t> x(batch * n);
  for (auto& v : x) v = ad(rng);

  WeightMemory exact_mem;
  exact_mem.array_n = n;
  exact_mem.v_bits = 2;
  encode_matrix(exact_mem, 0, w, n, n, std::vector<int>(n, 3));
  const auto exact = simulate_mm(exact_mem, x, table, rng);
  const std::vector<double> ref(exact.outputs.begin(), exact.outputs.end());

  // Each column is one output, so its error reaches exactly one output.
  SensitivityMap map;
  map.outputs = n;
  for (std::size_t c = 0; c < n; ++c) {
    map.neurons.push_back({0, c});
    map.fan_in.push_back(n);
    map.method.push_back(SensitivityMethod::analytic);
    for (std::size_t o = 0; o < n; ++o) map.es.push_back(o == c ? 1.0 : 0.0);
  }

  const double unit = 16.0 * table.level(0).single_pe_variance;  // one column at the lowest level
  std::printf("%10s %14s %14s %14s %8s  levels\n", "budget", "predicted", "simulated", "sim/pred", "saving");
  for (double cols : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0}) {
    const auto inst = build_instance(map, table, cols, unit, ObjectiveMode::linear_v);
    const auto a = solve_assignment(inst);
    WeightMemory mem;
    mem.array_n = n;
    mem.v_bits = 2;
    encode_matrix(mem, 0, w, n, n, a.codes);
    const auto r = simulate_mm(mem, x, table, rng);
    const std::vector<double> noisy(r.outputs.begin(), r.outputs.end());
    const double mse = output_error_variance(ref, noisy, n);
    EnergyParams ep;
    const double saving = energy_report(a.codes, table.levels(), map.fan_in, ep).saving;
    std::printf("%10.3g %14.4g %14.4g %14.3f %7.1f%%  ", inst.budget, a.predicted_mse, mse,
                a.predicted_mse > 0 ? mse / a.predicted_mse : 0.0, 100 * saving);
    for (int c : a.codes) std::printf("%d", c);
    std::printf("\n");
  }
  std::printf("cycles per %zu-vector batch: %llu\n", batch, static_cast<unsigned long long>(exact.cycles));
}
