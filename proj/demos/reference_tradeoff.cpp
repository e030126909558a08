// Energy/accuracy trade-off of the bundled 784-128-10 MNIST model.

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "xtpu/xtpu.hpp"

using namespace xtpu;

int main() {
  const std::string dir = XTPU_DATA_DIR;
  const auto model = load_model(dir + "/models/mnist_fc_784_128_10.json");
  const auto data = load_mnist_idx(dir + "/mnist/test-images-idx3-ubyte", dir + "/mnist/test-labels-idx1-ubyte");
  const auto table = fit_linear_scaling(load_variance_table(dir + "/pe_variance.csv", {0.5, 0.6, 0.7, 0.8}));
  const auto calib = data.head(256);

  const auto map = sensitivity_map(model, calib, SensitivityMethod::automatic, {}, 1);
  std::vector<std::size_t> order(map.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return map.l2(a) > map.l2(b); });
  std::printf("most sensitive hidden neurons:");
  int shown = 0;
  for (auto id : order)
    if (map.neurons[id].layer == 0 && shown++ < 5) std::printf(" h%zu=%.3f", map.neurons[id].index, map.l2(id));
  std::printf("\nleast sensitive:");
  for (auto it = order.rbegin(); it != order.rbegin() + 5; ++it) std::printf(" h%zu=%.4f", map.neurons[*it].index, map.l2(*it));
  std::printf("\n\n");

  const double base = baseline_mse(model, calib);
  std::printf("nominal accuracy %.4f, baseline MSE %.1f LSB^2\n", accuracy(model, data), base);
  std::printf("%8s %9s %9s %9s  #0.5V #0.6V #0.7V #0.8V\n", "mse_ub", "saving", "accuracy", "mse/bud");
  for (double rel : {0.01, 0.03, 0.05, 0.1, 0.2, 0.5}) {
    const auto inst = build_instance(map, table, rel, base, ObjectiveMode::linear_v);
    const auto a = solve_assignment(inst);
    SimulationOptions opt;
    opt.seed = 7;
    opt.budget = inst.budget;
    const auto r = simulate_inference(model, a.codes, data, table, opt);
    int hist[4] = {};
    for (int c : a.codes) ++hist[c];
    std::printf("%8.2f %8.1f%% %9.4f %9.3f  %5d %5d %5d %5d\n", rel, 100 * r.energy_saving, *r.accuracy,
                r.empirical_mse / inst.budget, hist[0], hist[1], hist[2], hist[3]);
  }
}
