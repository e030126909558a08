#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "xtpu/error.hpp"
#include "xtpu/error_model.hpp"
#include "xtpu/model.hpp"
#include "xtpu/sensitivity.hpp"

namespace xtpu {

enum class ObjectiveMode { linear_v, quadratic_v };

inline std::string_view to_string(ObjectiveMode m) { return m == ObjectiveMode::linear_v ? "linear_v" : "quadratic_v"; }

inline ObjectiveMode parse_objective_mode(std::string_view s) {
  if (s == "linear_v") return ObjectiveMode::linear_v;
  if (s == "quadratic_v") return ObjectiveMode::quadratic_v;
  fail(ErrorKind::config, "unknown objective_mode '" + std::string(s) + "'");
}

/// Multiple-choice knapsack: pick one level per neuron, minimizing total cost
/// subject to total weight (predicted output-error variance) <= budget.
struct AssignmentInstance {
  std::vector<std::size_t> fan_in;  // k_n, by neuron id
  std::vector<VoltageLevel> levels;
  std::vector<double> cost;    // [neurons x levels]
  std::vector<double> weight;  // [neurons x levels]
  double budget = 0.0;         // may be +inf

  std::size_t neurons() const { return fan_in.size(); }
  std::size_t level_count() const { return levels.size(); }
  int nominal_code() const { return static_cast<int>(levels.size()) - 1; }
  double c(std::size_t n, std::size_t v) const { return cost[n * levels.size() + v]; }
  double w(std::size_t n, std::size_t v) const { return weight[n * levels.size() + v]; }

  void validate() const {
    const std::size_t L = levels.size();
    if (L == 0) fail(ErrorKind::dimension, "instance has no voltage levels");
    if (cost.size() != neurons() * L || weight.size() != neurons() * L)
      fail(ErrorKind::dimension, "instance cost/weight tables do not match neurons x levels");
    if (!(budget >= 0.0)) fail(ErrorKind::range, "budget must be nonnegative");
    for (std::size_t n = 0; n < neurons(); ++n) {
      if (w(n, L - 1) != 0.0) fail(ErrorKind::range, "nominal level must carry zero weight");
      for (std::size_t v = 0; v < L; ++v) {
        if (!(w(n, v) >= 0.0) || !std::isfinite(w(n, v))) fail(ErrorKind::range, "weights must be finite and >= 0");
        if (!std::isfinite(c(n, v))) fail(ErrorKind::range, "costs must be finite");
        if (v > 0 && w(n, v) > w(n, v - 1))
          fail(ErrorKind::range, "weights must not increase with voltage within a neuron");
      }
    }
  }
};

inline double level_cost(double volts, ObjectiveMode mode) {
  return mode == ObjectiveMode::linear_v ? volts : volts * volts;
}

/// Instance for one relative MSE bound. Weight of neuron n at level v is
///   (sum_o ES[n][o]^2) * k_n * sigma^2_v
/// and the budget is mse_ub_relative * baseline_mse (same units).
inline AssignmentInstance build_instance(const SensitivityMap& map, const ErrorModelTable& table,
                                         double mse_ub_relative, double baseline_mse, ObjectiveMode mode) {
  if (!table.fitted()) fail(ErrorKind::insufficient, "error model table is not fitted");
  if (!(baseline_mse >= 0.0)) fail(ErrorKind::range, "baseline_mse must be nonnegative");
  if (!(mse_ub_relative >= 0.0)) fail(ErrorKind::range, "mse_ub must be nonnegative");
  if (map.fan_in.size() != map.size() || map.es.size() != map.size() * map.outputs)
    fail(ErrorKind::dimension, "sensitivity map is inconsistent");
  AssignmentInstance inst;
  inst.fan_in = map.fan_in;
  inst.levels = table.levels();
  const std::size_t L = inst.levels.size();
  inst.cost.resize(map.size() * L);
  inst.weight.resize(map.size() * L);
  for (std::size_t n = 0; n < map.size(); ++n) {
    const double es2k = map.sum_squares(n) * static_cast<double>(map.fan_in[n]);
    for (std::size_t v = 0; v < L; ++v) {
      inst.cost[n * L + v] = level_cost(inst.levels[v].volts, mode);
      inst.weight[n * L + v] =
          table.is_nominal(static_cast<int>(v)) ? 0.0 : es2k * table.level(static_cast<int>(v)).single_pe_variance;
    }
  }
  inst.budget = std::isinf(mse_ub_relative) ? std::numeric_limits<double>::infinity() : mse_ub_relative * baseline_mse;
  inst.validate();
  return inst;
}

struct VoltageAssignment {
  std::vector<int> codes;  // by neuron id
  double objective_value = 0.0;
  double predicted_mse = 0.0;
  bool feasible = false;
  std::string method;           // "dp", "branch_and_bound", "brute_force"
  std::uint64_t explored = 0;   // DP cells or search nodes
};

inline double predicted_mse(const AssignmentInstance& inst, std::span<const int> codes) {
  if (codes.size() != inst.neurons())
    fail(ErrorKind::dimension, "assignment covers " + std::to_string(codes.size()) + " of " +
                                   std::to_string(inst.neurons()) + " neurons");
  double s = 0.0;
  for (std::size_t n = 0; n < codes.size(); ++n) {
    if (codes[n] < 0 || static_cast<std::size_t>(codes[n]) >= inst.level_count())
      fail(ErrorKind::range, "assignment uses an unknown voltage code");
    s += inst.w(n, static_cast<std::size_t>(codes[n]));
  }
  return s;
}

inline double predicted_mse(const AssignmentInstance& inst, const VoltageAssignment& a) {
  return predicted_mse(inst, a.codes);
}

inline double objective_value(const AssignmentInstance& inst, std::span<const int> codes) {
  double s = 0.0;
  for (std::size_t n = 0; n < codes.size(); ++n) s += inst.c(n, static_cast<std::size_t>(codes[n]));
  return s;
}

// ---------------------------------------------------------------------------
// Exact integer form shared by every solver. Costs become integer "excess"
// units above each neuron's cheapest level; weights are rounded up and the
// budget down on a 2^-40 grid of the worst-case total, so an integer-feasible
// assignment is feasible in the reals and all comparisons are exact. The
// lexicographic goal is (total cost, total weight, code vector).

struct IntegerInstance {
  std::size_t n = 0;
  std::size_t L = 0;
  std::vector<std::int64_t> excess;  // [n x L]
  std::vector<std::int64_t> weight;  // [n x L]
  std::int64_t budget = 0;
  static constexpr std::int64_t kUnbounded = std::numeric_limits<std::int64_t>::max() / 4;

  std::int64_t e(std::size_t i, std::size_t v) const { return excess[i * L + v]; }
  std::int64_t w(std::size_t i, std::size_t v) const { return weight[i * L + v]; }
};

inline IntegerInstance integerize(const AssignmentInstance& inst) {
  inst.validate();
  IntegerInstance q;
  q.n = inst.neurons();
  q.L = inst.level_count();
  q.excess.resize(q.n * q.L);
  q.weight.resize(q.n * q.L);

  // smallest decimal grid that represents every cost, else the finest usable
  double max_abs = 0.0;
  for (double c : inst.cost) max_abs = std::max(max_abs, std::abs(c));
  double scale = 1.0;
  for (int d = 0; d <= 9; ++d) {
    const double s = std::pow(10.0, d);
    if (max_abs * s > 1e15) break;
    scale = s;
    const bool on_grid = std::all_of(inst.cost.begin(), inst.cost.end(), [&](double c) {
      return std::abs(c * s - std::round(c * s)) <= 1e-6;
    });
    if (on_grid) break;
  }
  std::int64_t g = 0;
  for (std::size_t i = 0; i < q.n; ++i) {
    std::int64_t lo = std::numeric_limits<std::int64_t>::max();
    for (std::size_t v = 0; v < q.L; ++v) lo = std::min<std::int64_t>(lo, std::llround(inst.c(i, v) * scale));
    for (std::size_t v = 0; v < q.L; ++v) {
      q.excess[i * q.L + v] = static_cast<std::int64_t>(std::llround(inst.c(i, v) * scale)) - lo;
      g = std::gcd(g, q.excess[i * q.L + v]);
    }
  }
  if (g > 1)
    for (auto& e : q.excess) e /= g;

  double worst = 0.0;
  for (std::size_t i = 0; i < q.n; ++i) {
    double mx = 0.0;
    for (std::size_t v = 0; v < q.L; ++v) mx = std::max(mx, inst.w(i, v));
    worst += mx;
  }
  if (worst == 0.0) {
    std::fill(q.weight.begin(), q.weight.end(), 0);
    q.budget = IntegerInstance::kUnbounded;
    return q;
  }
  const double unit = worst / 1099511627776.0;  // 2^40
  for (std::size_t k = 0; k < q.weight.size(); ++k)
    q.weight[k] = inst.weight[k] == 0.0 ? 0 : static_cast<std::int64_t>(std::ceil(inst.weight[k] / unit));
  q.budget = inst.budget >= worst ? IntegerInstance::kUnbounded
                                  : static_cast<std::int64_t>(std::floor(inst.budget / unit));
  return q;
}

namespace detail {

inline VoltageAssignment finish(const AssignmentInstance& inst, std::vector<int> codes, std::string method,
                                std::uint64_t explored) {
  VoltageAssignment a;
  a.codes = std::move(codes);
  a.objective_value = objective_value(inst, a.codes);
  a.predicted_mse = predicted_mse(inst, a.codes);
  a.feasible = true;
  a.method = std::move(method);
  a.explored = explored;
  return a;
}

}  // namespace detail

/// Exhaustive optimum; the testing oracle for the solvers. Enumerates code
/// vectors in lexicographic order and keeps strict improvements only, so the
/// lexicographically smallest optimum wins ties.
inline VoltageAssignment brute_force_assignment(const AssignmentInstance& inst,
                                                std::uint64_t max_combinations = 100000000) {
  const IntegerInstance q = integerize(inst);
  double combos = std::pow(static_cast<double>(q.L), static_cast<double>(q.n));
  if (combos > static_cast<double>(max_combinations))
    fail(ErrorKind::too_large, "brute force would enumerate " + std::to_string(combos) + " assignments");
  std::vector<int> cur(q.n, 0), best;
  std::int64_t best_e = std::numeric_limits<std::int64_t>::max(), best_w = 0;
  std::uint64_t leaves = 0;
  auto rec = [&](auto&& self, std::size_t i, std::int64_t e, std::int64_t w) -> void {
    if (i == q.n) {
      ++leaves;
      if (w <= q.budget && (e < best_e || (e == best_e && w < best_w))) {
        best_e = e;
        best_w = w;
        best = cur;
      }
      return;
    }
    for (std::size_t v = 0; v < q.L; ++v) {
      cur[i] = static_cast<int>(v);
      self(self, i + 1, e + q.e(i, v), w + q.w(i, v));
    }
  };
  rec(rec, 0, 0, 0);
  if (best.size() != q.n) fail(ErrorKind::internal, "no feasible assignment (nominal should always fit)");
  return detail::finish(inst, std::move(best), "brute_force", leaves);
}

/// Exact dynamic program over total excess cost: S[i][r] is the least weight
/// of neurons i.. reaching excess r. Returns false when the table would
/// exceed `max_cells`.
inline bool solve_assignment_dp(const AssignmentInstance& inst, VoltageAssignment& out,
                                std::uint64_t max_cells = 20000000) {
  const IntegerInstance q = integerize(inst);
  std::vector<std::int64_t> suffix_range(q.n + 1, 0);
  for (std::size_t i = q.n; i-- > 0;) {
    std::int64_t mx = 0;
    for (std::size_t v = 0; v < q.L; ++v) mx = std::max(mx, q.e(i, v));
    suffix_range[i] = suffix_range[i + 1] + mx;
  }
  const auto R = static_cast<std::uint64_t>(suffix_range[0]);
  if ((R + 1) * (q.n + 1) > max_cells) return false;
  const std::size_t W = static_cast<std::size_t>(R) + 1;
  constexpr std::int64_t INF = std::numeric_limits<std::int64_t>::max();
  std::vector<std::int64_t> S((q.n + 1) * W, INF);
  S[q.n * W + 0] = 0;
  for (std::size_t i = q.n; i-- > 0;) {
    const std::int64_t* next = &S[(i + 1) * W];
    std::int64_t* cur = &S[i * W];
    for (std::size_t v = 0; v < q.L; ++v) {
      const auto e = static_cast<std::size_t>(q.e(i, v));
      const std::int64_t wv = q.w(i, v);
      for (std::size_t r = e; r <= static_cast<std::size_t>(suffix_range[i]); ++r) {
        if (next[r - e] == INF) continue;
        const std::int64_t cand = next[r - e] + wv;
        if (cand < cur[r]) cur[r] = cand;
      }
    }
  }
  std::size_t r = 0;
  while (r < W && !(S[r] != INF && S[r] <= q.budget)) ++r;
  if (r == W) fail(ErrorKind::internal, "no feasible assignment (nominal should always fit)");

  std::vector<int> codes(q.n);
  std::int64_t target = S[r];
  for (std::size_t i = 0; i < q.n; ++i) {
    const std::int64_t* next = &S[(i + 1) * W];
    bool found = false;
    for (std::size_t v = 0; v < q.L && !found; ++v) {
      const auto e = static_cast<std::size_t>(q.e(i, v));
      if (e > r || next[r - e] == INF) continue;
      if (next[r - e] + q.w(i, v) == target) {
        codes[i] = static_cast<int>(v);
        target -= q.w(i, v);
        r -= e;
        found = true;
      }
    }
    if (!found) fail(ErrorKind::internal, "dynamic program reconstruction failed");
  }
  out = detail::finish(inst, std::move(codes), "dp", (q.n + 1) * W);
  return true;
}

/// Exact depth-first branch and bound. Children are visited in increasing
/// code order and the incumbent only changes on strict (cost, weight)
/// improvement, so ties resolve exactly as in the brute-force oracle. Bounds:
/// the LP relaxation of the remaining multiple-choice knapsack (greedy over
/// the lower convex hull of each neuron's (weight, cost) options) for cost,
/// and the sum of per-neuron minimum weights for feasibility and weight ties.
inline VoltageAssignment solve_assignment_bnb(const AssignmentInstance& inst) {
  const IntegerInstance q = integerize(inst);
  struct Segment {
    double slope;     // excess cost per unit of weight removed
    double dw;        // weight removed
    std::size_t neuron;
  };
  // per neuron: start at the cheapest (then lightest) option; hull toward lighter options
  std::vector<std::int64_t> start_w(q.n), min_w(q.n);
  std::vector<Segment> segs;
  for (std::size_t i = 0; i < q.n; ++i) {
    std::vector<std::pair<std::int64_t, std::int64_t>> pts;  // (w, e)
    for (std::size_t v = 0; v < q.L; ++v) pts.emplace_back(q.w(i, v), q.e(i, v));
    std::sort(pts.begin(), pts.end());  // by weight, then cost
    min_w[i] = pts.front().first;
    // Pareto frontier: weight ascending with strictly decreasing cost
    std::vector<std::pair<std::int64_t, std::int64_t>> front;
    for (const auto& p : pts)
      if (front.empty() || p.second < front.back().second) front.push_back(p);
    // lower convex hull of the frontier
    std::vector<std::pair<std::int64_t, std::int64_t>> hull;
    for (const auto& p : front) {
      while (hull.size() >= 2) {
        const auto& a = hull[hull.size() - 2];
        const auto& b = hull.back();
        const double cross = static_cast<double>(b.first - a.first) * static_cast<double>(p.second - a.second) -
                             static_cast<double>(b.second - a.second) * static_cast<double>(p.first - a.first);
        if (cross <= 0.0) hull.pop_back();
        else break;
      }
      hull.push_back(p);
    }
    start_w[i] = hull.back().first;  // heaviest hull point = cheapest option
    for (std::size_t h = hull.size() - 1; h > 0; --h) {
      const double dw = static_cast<double>(hull[h].first - hull[h - 1].first);
      const double de = static_cast<double>(hull[h - 1].second - hull[h].second);
      segs.push_back({de / dw, dw, i});
    }
  }
  std::sort(segs.begin(), segs.end(), [](const Segment& a, const Segment& b) {
    return a.slope < b.slope || (a.slope == b.slope && a.neuron < b.neuron);
  });
  std::vector<std::int64_t> suffix_start_w(q.n + 1, 0), suffix_min_w(q.n + 1, 0);
  for (std::size_t i = q.n; i-- > 0;) {
    suffix_start_w[i] = suffix_start_w[i + 1] + start_w[i];
    suffix_min_w[i] = suffix_min_w[i + 1] + min_w[i];
  }

  auto lp_bound = [&](std::size_t i, std::int64_t cap) -> double {
    double need = static_cast<double>(suffix_start_w[i] - cap);
    if (need <= 0.0) return 0.0;
    double cost = 0.0;
    for (const Segment& s : segs) {
      if (s.neuron < i) continue;
      if (s.dw >= need) return cost + s.slope * need;
      cost += s.slope * s.dw;
      need -= s.dw;
    }
    return std::numeric_limits<double>::infinity();
  };

  std::vector<int> cur(q.n, 0), best;
  std::int64_t best_e = std::numeric_limits<std::int64_t>::max(), best_w = std::numeric_limits<std::int64_t>::max();
  std::uint64_t nodes = 0;
  auto rec = [&](auto&& self, std::size_t i, std::int64_t e, std::int64_t w) -> void {
    ++nodes;
    if (i == q.n) {
      if (e < best_e || (e == best_e && w < best_w)) {
        best_e = e;
        best_w = w;
        best = cur;
      }
      return;
    }
    if (w + suffix_min_w[i] > q.budget) return;
    const double lp = lp_bound(i, q.budget == IntegerInstance::kUnbounded ? suffix_start_w[i] : q.budget - w);
    if (std::isinf(lp)) return;
    const std::int64_t lb = e + static_cast<std::int64_t>(std::ceil(lp - 1e-9));
    if (lb > best_e) return;
    if (lb == best_e && w + suffix_min_w[i] >= best_w) return;
    for (std::size_t v = 0; v < q.L; ++v) {
      if (w + q.w(i, v) + suffix_min_w[i + 1] > q.budget) continue;
      cur[i] = static_cast<int>(v);
      self(self, i + 1, e + q.e(i, v), w + q.w(i, v));
    }
  };
  rec(rec, 0, 0, 0);
  if (best.size() != q.n) fail(ErrorKind::internal, "no feasible assignment (nominal should always fit)");
  return detail::finish(inst, std::move(best), "branch_and_bound", nodes);
}

/// Exact optimum. Uses the dynamic program when the cost grid is small enough
/// and branch and bound otherwise.
inline VoltageAssignment solve_assignment(const AssignmentInstance& inst) {
  VoltageAssignment a;
  if (solve_assignment_dp(inst, a)) return a;
  return solve_assignment_bnb(inst);
}

// ---------------------------------------------------------------------------
// Energy

struct EnergyParams {
  double v_nominal = 0.8;
  double multiplier_share = 0.56;
  bool weight_by_fan_in = true;
};

struct EnergyReport {
  std::vector<double> per_neuron;  // relative energy (1 == nominal PE) x optional k_n
  double total = 0.0;
  double total_nominal = 0.0;
  double saving = 0.0;
};

/// Relative PE energy at `volts` when only the multiplier is overscaled.
inline double pe_energy_factor(double volts, const EnergyParams& p) {
  const double r = volts / p.v_nominal;
  return (1.0 - p.multiplier_share) + p.multiplier_share * r * r;
}

inline EnergyReport energy_report(std::span<const int> codes, const std::vector<VoltageLevel>& levels,
                                  std::span<const std::size_t> fan_in, const EnergyParams& p) {
  if (!(p.multiplier_share >= 0.0 && p.multiplier_share <= 1.0))
    fail(ErrorKind::range, "multiplier_share must lie in [0, 1]");
  if (levels.empty() || std::abs(levels.back().volts - p.v_nominal) > kVoltTolerance)
    fail(ErrorKind::config, "v_nominal must equal the highest voltage level");
  if (codes.size() != fan_in.size()) fail(ErrorKind::dimension, "assignment and fan-in lists differ in length");
  EnergyReport r;
  r.per_neuron.resize(codes.size());
  for (std::size_t n = 0; n < codes.size(); ++n) {
    if (codes[n] < 0 || static_cast<std::size_t>(codes[n]) >= levels.size())
      fail(ErrorKind::range, "assignment uses an unknown voltage code");
    const double macs = p.weight_by_fan_in ? static_cast<double>(fan_in[n]) : 1.0;
    r.per_neuron[n] = macs * pe_energy_factor(levels[static_cast<std::size_t>(codes[n])].volts, p);
    r.total += r.per_neuron[n];
    r.total_nominal += macs;
  }
  r.saving = r.total_nominal > 0.0 ? 1.0 - r.total / r.total_nominal : 0.0;
  return r;
}

inline EnergyReport energy_report(const VoltageAssignment& a, const AssignmentInstance& inst, const EnergyParams& p) {
  return energy_report(a.codes, inst.levels, inst.fan_in, p);
}

inline EnergyReport energy_report(const VoltageAssignment& a, const QuantizedModel& m,
                                  const std::vector<VoltageLevel>& levels, const EnergyParams& p) {
  const auto k = m.fan_ins();
  return energy_report(a.codes, levels, k, p);
}

// ---------------------------------------------------------------------------
// Files

/// CSV: neuron_id,voltage_code,volts
inline void write_assignment_csv(std::ostream& os, std::span<const int> codes, const std::vector<VoltageLevel>& levels) {
  os << "neuron_id,voltage_code,volts\n";
  for (std::size_t n = 0; n < codes.size(); ++n)
    os << n << ',' << codes[n] << ',' << levels.at(static_cast<std::size_t>(codes[n])).volts << '\n';
}

inline std::vector<int> read_assignment_csv(std::istream& is, std::size_t level_count) {
  std::string line;
  if (!std::getline(is, line) || detail::trim(line) != "neuron_id,voltage_code,volts")
    fail(ErrorKind::parse, "assignment CSV: expected header neuron_id,voltage_code,volts");
  std::vector<int> codes;
  while (std::getline(is, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != 3) fail(ErrorKind::parse, "assignment CSV: malformed row '" + line + "'");
    const auto id = static_cast<std::size_t>(detail::parse_real(cells[0], "neuron_id"));
    const int code = static_cast<int>(detail::parse_real(cells[1], "voltage_code"));
    if (id != codes.size()) fail(ErrorKind::parse, "assignment CSV: neuron ids must be dense and ordered");
    if (code < 0 || static_cast<std::size_t>(code) >= level_count)
      fail(ErrorKind::range, "assignment CSV: voltage code " + std::to_string(code) + " out of range");
    codes.push_back(code);
  }
  return codes;
}

}  // namespace xtpu
