#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xtpu/assignment.hpp"
#include "xtpu/dataset.hpp"
#include "xtpu/error.hpp"
#include "xtpu/error_model.hpp"
#include "xtpu/model.hpp"
#include "xtpu/parallel.hpp"
#include "xtpu/random.hpp"

namespace xtpu {

// ---------------------------------------------------------------------------
// Weight-memory words: voltage-select bits above the 8-bit weight

/// Selection bits needed for `level_count` voltage levels.
inline unsigned voltage_bits(std::size_t level_count) {
  if (level_count == 0) fail(ErrorKind::range, "at least one voltage level is required");
  return static_cast<unsigned>(std::bit_width(level_count - 1));
}

inline std::uint32_t encode_word(int weight, int code, unsigned v_bits) {
  if (weight < -128 || weight > 127) fail(ErrorKind::range, "weight " + std::to_string(weight) + " is not int8");
  if (v_bits > 16) fail(ErrorKind::range, "v_bits above 16 is not supported");
  if (code < 0 || static_cast<std::uint32_t>(code) >= (1u << v_bits))
    fail(ErrorKind::range, "voltage code " + std::to_string(code) + " does not fit in " + std::to_string(v_bits) +
                               " selection bits");
  return (static_cast<std::uint32_t>(code) << 8) | static_cast<std::uint8_t>(static_cast<std::int8_t>(weight));
}

struct DecodedWord {
  int weight = 0;
  int code = 0;
  friend bool operator==(const DecodedWord&, const DecodedWord&) = default;
};

inline DecodedWord decode_voltage(std::uint32_t word, unsigned v_bits) {
  if (v_bits > 16 || (word >> (8 + v_bits)) != 0)
    fail(ErrorKind::range, "word has bits above the " + std::to_string(8 + v_bits) + "-bit memory width");
  return {static_cast<std::int8_t>(static_cast<std::uint8_t>(word & 0xFFu)), static_cast<int>(word >> 8)};
}

/// One array_n x array_n (or smaller, at the edges) block of a layer's
/// weight matrix. Array rows carry inputs, columns carry neurons.
struct WeightTile {
  std::size_t layer = 0;
  std::size_t row0 = 0;  // first input index
  std::size_t col0 = 0;  // first neuron index within the layer
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> words;  // column-major: words[c * rows + r]

  std::uint32_t word(std::size_t r, std::size_t c) const { return words[c * rows + r]; }
};

struct WeightMemory {
  std::size_t array_n = 0;
  unsigned v_bits = 0;
  std::vector<std::size_t> layer_inputs;   // column height per layer
  std::vector<std::size_t> layer_outputs;  // neuron count per layer
  std::vector<WeightTile> tiles;           // by layer, then column block, then row block

  std::size_t word_bits() const { return 8 + v_bits; }
};

/// Tile one int8 matrix (`cols` neurons x `rows` inputs, row-major by neuron)
/// with one voltage code per neuron, appending to `mem`.
inline void encode_matrix(WeightMemory& mem, std::size_t layer, std::span<const std::int8_t> weights,
                          std::size_t rows, std::size_t cols, std::span<const int> codes) {
  if (weights.size() != rows * cols || codes.size() != cols)
    fail(ErrorKind::dimension, "weight matrix or code list does not match the layer shape");
  if (mem.array_n == 0) fail(ErrorKind::range, "array_n must be positive");
  while (mem.layer_inputs.size() <= layer) {
    mem.layer_inputs.push_back(0);
    mem.layer_outputs.push_back(0);
  }
  mem.layer_inputs[layer] = rows;
  mem.layer_outputs[layer] = cols;
  for (std::size_t c0 = 0; c0 < cols; c0 += mem.array_n) {
    for (std::size_t r0 = 0; r0 < rows; r0 += mem.array_n) {
      WeightTile t;
      t.layer = layer;
      t.row0 = r0;
      t.col0 = c0;
      t.rows = std::min(mem.array_n, rows - r0);
      t.cols = std::min(mem.array_n, cols - c0);
      t.words.resize(t.rows * t.cols);
      for (std::size_t c = 0; c < t.cols; ++c)
        for (std::size_t r = 0; r < t.rows; ++r)
          t.words[c * t.rows + r] = encode_word(weights[(c0 + c) * rows + r0 + r], codes[c0 + c], mem.v_bits);
      mem.tiles.push_back(std::move(t));
    }
  }
}

/// Encode every layer with the per-neuron codes (indexed by global neuron id).
inline WeightMemory encode_weight_memory(const QuantizedModel& m, std::span<const int> codes, std::size_t array_n,
                                         unsigned v_bits) {
  if (codes.size() != m.neuron_count())
    fail(ErrorKind::dimension, "assignment covers " + std::to_string(codes.size()) + " of " +
                                   std::to_string(m.neuron_count()) + " neurons");
  WeightMemory mem;
  mem.array_n = array_n;
  mem.v_bits = v_bits;
  std::size_t id = 0;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const Layer& L = m.layers[l];
    encode_matrix(mem, l, L.weights, L.inputs, L.outputs, codes.subspan(id, L.outputs));
    id += L.outputs;
  }
  return mem;
}

/// Per-layer codes recovered from the selection bits. Every word of a column
/// must agree.
inline std::vector<std::vector<int>> column_codes(const WeightMemory& mem) {
  std::vector<std::vector<int>> codes(mem.layer_outputs.size());
  for (std::size_t l = 0; l < codes.size(); ++l) codes[l].assign(mem.layer_outputs[l], -1);
  for (const auto& t : mem.tiles) {
    for (std::size_t c = 0; c < t.cols; ++c) {
      for (std::size_t r = 0; r < t.rows; ++r) {
        const int code = decode_voltage(t.word(r, c), mem.v_bits).code;
        int& slot = codes.at(t.layer).at(t.col0 + c);
        if (slot == -1) slot = code;
        else if (slot != code)
          fail(ErrorKind::parse, "layer " + std::to_string(t.layer) + " column " + std::to_string(t.col0 + c) +
                                     " mixes voltage codes");
      }
    }
  }
  for (const auto& layer : codes)
    for (int c : layer)
      if (c < 0) fail(ErrorKind::parse, "weight memory leaves a column without words");
  return codes;
}

/// Assignment (by global neuron id) stored in the memory.
inline std::vector<int> assignment_from_memory(const WeightMemory& mem) {
  std::vector<int> out;
  for (const auto& layer : column_codes(mem)) out.insert(out.end(), layer.begin(), layer.end());
  return out;
}

// ---------------------------------------------------------------------------
// Memory dump: header comments, then one binary word per line, column-major
// within each tile.

inline void write_memory_dump(std::ostream& os, const WeightMemory& mem) {
  os << "# xtpu weight memory\n";
  os << "# array_n " << mem.array_n << " v_bits " << mem.v_bits << " word_bits " << mem.word_bits() << '\n';
  for (std::size_t l = 0; l < mem.layer_inputs.size(); ++l)
    os << "# layer " << l << " inputs " << mem.layer_inputs[l] << " outputs " << mem.layer_outputs[l] << '\n';
  for (const auto& t : mem.tiles) {
    os << "# tile layer " << t.layer << " row0 " << t.row0 << " col0 " << t.col0 << " rows " << t.rows << " cols "
       << t.cols << '\n';
    for (std::uint32_t w : t.words) {
      for (std::size_t b = mem.word_bits(); b-- > 0;) os << (((w >> b) & 1u) ? '1' : '0');
      os << '\n';
    }
  }
}

inline WeightMemory read_memory_dump(std::istream& is) {
  WeightMemory mem;
  std::string line;
  auto expect = [](std::istringstream& ss, std::string_view key) {
    std::string k;
    if (!(ss >> k) || k != key) fail(ErrorKind::parse, "memory dump: expected '" + std::string(key) + "'");
    std::size_t v = 0;
    if (!(ss >> v)) fail(ErrorKind::parse, "memory dump: missing value for '" + std::string(key) + "'");
    return v;
  };
  if (!std::getline(is, line) || line != "# xtpu weight memory") fail(ErrorKind::parse, "memory dump: bad banner");
  if (!std::getline(is, line)) fail(ErrorKind::parse, "memory dump: truncated header");
  {
    std::istringstream ss(line.substr(1));
    mem.array_n = expect(ss, "array_n");
    mem.v_bits = static_cast<unsigned>(expect(ss, "v_bits"));
    if (expect(ss, "word_bits") != mem.word_bits()) fail(ErrorKind::parse, "memory dump: inconsistent word_bits");
  }
  WeightTile* cur = nullptr;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string kind;
      ss >> kind;
      if (kind == "layer") {
        const std::size_t l = [&] { std::size_t v; ss >> v; return v; }();
        if (l != mem.layer_inputs.size()) fail(ErrorKind::parse, "memory dump: layers out of order");
        mem.layer_inputs.push_back(expect(ss, "inputs"));
        mem.layer_outputs.push_back(expect(ss, "outputs"));
      } else if (kind == "tile") {
        if (cur && cur->words.size() != cur->rows * cur->cols) fail(ErrorKind::parse, "memory dump: short tile");
        WeightTile t;
        t.layer = expect(ss, "layer");
        t.row0 = expect(ss, "row0");
        t.col0 = expect(ss, "col0");
        t.rows = expect(ss, "rows");
        t.cols = expect(ss, "cols");
        if (t.layer >= mem.layer_inputs.size() || t.row0 + t.rows > mem.layer_inputs[t.layer] ||
            t.col0 + t.cols > mem.layer_outputs[t.layer])
          fail(ErrorKind::parse, "memory dump: tile outside its layer");
        mem.tiles.push_back(std::move(t));
        cur = &mem.tiles.back();
      } else {
        fail(ErrorKind::parse, "memory dump: unknown header '" + kind + "'");
      }
      continue;
    }
    if (!cur) fail(ErrorKind::parse, "memory dump: word before the first tile");
    if (line.size() != mem.word_bits() || line.find_first_not_of("01") != std::string::npos)
      fail(ErrorKind::parse, "memory dump: malformed word '" + line + "'");
    if (cur->words.size() == cur->rows * cur->cols) fail(ErrorKind::parse, "memory dump: tile has too many words");
    cur->words.push_back(static_cast<std::uint32_t>(std::stoul(line, nullptr, 2)));
  }
  if (cur && cur->words.size() != cur->rows * cur->cols) fail(ErrorKind::parse, "memory dump: short tile");
  return mem;
}

// ---------------------------------------------------------------------------
// Cycle model of the weight-stationary array

struct CycleCount {
  std::uint64_t first_result = 0;
  std::uint64_t complete = 0;
  friend bool operator==(const CycleCount&, const CycleCount&) = default;
};

/// Latency of one vector of n elements: first result after n cycles and the
/// full product after 2n, each plus n when the weight prefetch is counted.
inline CycleCount cycle_count(std::size_t array_n, std::size_t vector_n, bool include_prefetch) {
  (void)array_n;
  if (vector_n == 0) fail(ErrorKind::range, "vector length must be at least 1");
  const std::uint64_t n = vector_n;
  return include_prefetch ? CycleCount{2 * n, 3 * n} : CycleCount{n, 2 * n};
}

/// Cycles to stream `batch` vectors through every tile of `layer`: each tile
/// is prefetched once, then vectors enter one per cycle.
inline std::uint64_t layer_cycles(const WeightMemory& mem, std::size_t layer, std::size_t batch) {
  if (batch == 0) return 0;
  std::uint64_t total = 0;
  for (const auto& t : mem.tiles)
    if (t.layer == layer) total += cycle_count(mem.array_n, t.rows, true).complete + (batch - 1);
  return total;
}

// ---------------------------------------------------------------------------
// Matrix multiplication with per-MAC errors

namespace detail {

struct LevelSampler {
  bool exact = true;
  double mean = 0.0;
  double sd = 0.0;
};

inline std::vector<LevelSampler> level_samplers(const ErrorModelTable& table, unsigned v_bits) {
  if (table.size() > (std::size_t{1} << v_bits))
    fail(ErrorKind::range, std::to_string(table.size()) + " voltage levels need more than " + std::to_string(v_bits) +
                               " selection bits");
  std::vector<LevelSampler> s(table.size());
  for (const auto& lv : table.levels()) {
    const auto& m = table.level(lv.code);
    if (table.is_nominal(lv.code)) continue;
    if (!m.fitted) fail(ErrorKind::insufficient, "error model level is not fitted");
    s[static_cast<std::size_t>(lv.code)] = {false, m.single_pe_mean, std::sqrt(m.single_pe_variance)};
  }
  return s;
}

/// Column sums of one layer for one input vector: sum_i (W*A + e) in 64 bits
/// across all tiles, one error draw per non-nominal MAC.
inline void systolic_column_sums(const WeightMemory& mem, std::size_t layer, std::span<const std::int32_t> x,
                                 const std::vector<LevelSampler>& samplers, Rng& rng, std::span<std::int64_t> acc) {
  std::normal_distribution<double> unit(0.0, 1.0);
  std::fill(acc.begin(), acc.end(), 0);
  for (const auto& t : mem.tiles) {
    if (t.layer != layer) continue;
    for (std::size_t c = 0; c < t.cols; ++c) {
      std::int64_t s = 0;
      for (std::size_t r = 0; r < t.rows; ++r) {
        const DecodedWord d = decode_voltage(t.word(r, c), mem.v_bits);
        if (static_cast<std::size_t>(d.code) >= samplers.size())
          fail(ErrorKind::range, "memory word selects an unknown voltage level");
        s += static_cast<std::int64_t>(d.weight) * x[t.row0 + r];
        const LevelSampler& ls = samplers[static_cast<std::size_t>(d.code)];
        if (!ls.exact) s += std::llround(ls.mean + ls.sd * unit(rng));
      }
      acc[t.col0 + c] += s;
    }
  }
}

}  // namespace detail

struct MatMulResult {
  std::vector<std::int32_t> outputs;  // [batch x cols], saturated accumulators
  std::size_t batch = 0;
  std::size_t cols = 0;
  std::uint64_t cycles = 0;
};

/// Multiply `batch` activation vectors (row-major, one per row) by the
/// weights of `layer`, injecting one error per MAC from the column's level.
inline MatMulResult simulate_mm(const WeightMemory& mem, std::span<const std::int32_t> activations,
                                const ErrorModelTable& table, Rng& rng, std::size_t layer = 0) {
  if (layer >= mem.layer_inputs.size()) fail(ErrorKind::dimension, "weight memory has no layer " + std::to_string(layer));
  const std::size_t rows = mem.layer_inputs[layer];
  if (rows == 0 || activations.size() % rows != 0)
    fail(ErrorKind::dimension, "activation width does not match the column height " + std::to_string(rows));
  const auto samplers = detail::level_samplers(table, mem.v_bits);
  MatMulResult r;
  r.batch = activations.size() / rows;
  r.cols = mem.layer_outputs[layer];
  r.outputs.resize(r.batch * r.cols);
  std::vector<std::int64_t> acc(r.cols);
  for (std::size_t b = 0; b < r.batch; ++b) {
    detail::systolic_column_sums(mem, layer, activations.subspan(b * rows, rows), samplers, rng, acc);
    for (std::size_t c = 0; c < r.cols; ++c) r.outputs[b * r.cols + c] = saturate32(acc[c]);
  }
  r.cycles = layer_cycles(mem, layer, r.batch);
  return r;
}

// ---------------------------------------------------------------------------
// Output error statistics

/// Sum over columns of the Bessel-corrected deviation variance
/// sum_s (err - ref)^2 / (n - 1), for n samples (rows) of `cols` outputs.
inline double output_error_variance(std::span<const double> reference, std::span<const double> erroneous,
                                    std::size_t cols = 1) {
  if (reference.size() != erroneous.size() || cols == 0 || reference.size() % cols != 0)
    fail(ErrorKind::dimension, "reference and erroneous outputs differ in shape");
  const std::size_t n = reference.size() / cols;
  if (n < 2) fail(ErrorKind::insufficient, "output error variance needs at least 2 samples");
  double s = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = erroneous[i] - reference[i];
    s += d * d;
  }
  return s / static_cast<double>(n - 1);
}

// ---------------------------------------------------------------------------
// Whole-model simulation

enum class SimulationMode { systolic, statistical };

inline std::string_view to_string(SimulationMode m) { return m == SimulationMode::systolic ? "systolic" : "statistical"; }

inline SimulationMode parse_simulation_mode(std::string_view s) {
  if (s == "systolic") return SimulationMode::systolic;
  if (s == "statistical") return SimulationMode::statistical;
  fail(ErrorKind::config, "unknown simulation mode '" + std::string(s) + "'");
}

struct SimulationOptions {
  SimulationMode mode = SimulationMode::statistical;
  std::size_t array_n = 256;
  std::optional<unsigned> v_bits;  // default: just enough for the table's levels
  std::uint64_t seed = 0;
  EnergyParams energy;
  std::optional<double> budget;  // absolute predicted-MSE budget for the violation check
  std::size_t threads = 0;
};

struct SimulationReport {
  double empirical_mse = 0.0;  // summed over outputs, squared output-accumulator LSBs
  std::optional<double> accuracy;
  std::optional<double> nominal_accuracy;
  double energy_saving = 0.0;
  std::uint64_t cycles = 0;
  std::optional<double> budget;
  bool violated = false;
  double violation = 0.0;  // max(0, mse / budget - 1)
  std::uint64_t seed = 0;
  SimulationMode mode = SimulationMode::statistical;
  std::size_t samples = 0;
};

/// Noise spec equivalent to the systolic error model: a neuron with k inputs
/// at level v receives mean k*mu_v and variance k*sigma^2_v.
inline NoiseSpec noise_for_assignment(const QuantizedModel& m, std::span<const int> codes,
                                      const ErrorModelTable& table) {
  if (codes.size() != m.neuron_count()) fail(ErrorKind::dimension, "assignment does not cover every neuron");
  NoiseSpec spec(m);
  for (std::size_t id = 0; id < codes.size(); ++id) {
    if (codes[id] < 0 || static_cast<std::size_t>(codes[id]) >= table.size())
      fail(ErrorKind::range, "assignment uses an unknown voltage code");
    if (table.is_nominal(codes[id])) continue;
    const NeuronRef ref = m.neuron(id);
    const auto st = column_error_stats(table, codes[id], m.layers[ref.layer].inputs);
    spec.set(ref, {st.mean, st.variance});
  }
  return spec;
}

/// Forward pass through the systolic array model: per-MAC errors, biases
/// added in the accumulator, saturation at readout.
inline ForwardResult forward_systolic(const QuantizedModel& m, const WeightMemory& mem,
                                      const std::vector<detail::LevelSampler>& samplers,
                                      std::span<const std::int32_t> input, Rng& rng) {
  check_input(m, input);
  ForwardResult r;
  r.accumulators.resize(m.layers.size());
  r.layer_outputs.resize(m.layers.size());
  std::vector<std::int64_t> acc;
  detail::run_layers_with(
      m, 0, {input.begin(), input.end()},
      [&](std::size_t l, std::span<const std::int32_t> x, std::vector<double>& z) {
        const Layer& L = m.layers[l];
        acc.assign(L.outputs, 0);
        detail::systolic_column_sums(mem, l, x, samplers, rng, acc);
        for (std::size_t j = 0; j < L.outputs; ++j) z[j] = static_cast<double>(saturate32(acc[j] + L.biases[j]));
      },
      r);
  return r;
}

/// Run every sample at nominal voltage and under `codes`, and compare.
/// Sample i uses the random stream child_rng(seed, i), so the report does
/// not depend on the thread count.
inline SimulationReport simulate_inference(const QuantizedModel& m, std::span<const int> codes, const Dataset& data,
                                           const ErrorModelTable& table, const SimulationOptions& opt) {
  data.validate();
  if (data.input_size != m.input_size) fail(ErrorKind::dimension, "dataset width differs from model input_size");
  if (codes.size() != m.neuron_count()) fail(ErrorKind::dimension, "assignment does not cover every neuron");
  const std::size_t n = data.size();
  const std::size_t width = m.output_size();
  const double lsb = m.output_lsb();

  const unsigned v_bits = opt.v_bits.value_or(voltage_bits(table.size()));
  const NoiseSpec noise = noise_for_assignment(m, codes, table);
  WeightMemory mem;
  std::vector<detail::LevelSampler> samplers;
  if (opt.mode == SimulationMode::systolic) {
    mem = encode_weight_memory(m, codes, opt.array_n, v_bits);
    samplers = detail::level_samplers(table, v_bits);
  }

  std::vector<double> ref(n * width), err(n * width);
  std::vector<char> hit_ref(n), hit_err(n);
  detail::parallel_for(n, opt.threads, [&](std::size_t i) {
    const auto x = data.input(i);
    const auto nominal = forward(m, x).outputs;
    Rng rng = child_rng(opt.seed, i);
    const auto noisy = opt.mode == SimulationMode::systolic ? forward_systolic(m, mem, samplers, x, rng).outputs
                                                             : forward(m, x, noise, rng).outputs;
    for (std::size_t o = 0; o < width; ++o) {
      ref[i * width + o] = nominal[o] / lsb;
      err[i * width + o] = noisy[o] / lsb;
    }
    if (data.is_classification()) {
      hit_ref[i] = static_cast<int>(argmax(nominal)) == data.labels[i];
      hit_err[i] = static_cast<int>(argmax(noisy)) == data.labels[i];
    }
  });

  SimulationReport rep;
  rep.samples = n;
  rep.seed = opt.seed;
  rep.mode = opt.mode;
  rep.empirical_mse = n >= 2 ? output_error_variance(ref, err, width) : 0.0;
  if (data.is_classification()) {
    const auto count = [&](const std::vector<char>& v) {
      return static_cast<double>(std::count(v.begin(), v.end(), 1)) / static_cast<double>(n);
    };
    rep.nominal_accuracy = count(hit_ref);
    rep.accuracy = count(hit_err);
  }
  const auto k = m.fan_ins();
  EnergyParams ep = opt.energy;
  ep.v_nominal = table.nominal().volts;
  rep.energy_saving = energy_report(codes, table.levels(), k, ep).saving;
  const WeightMemory& layout =
      opt.mode == SimulationMode::systolic ? mem : (mem = encode_weight_memory(m, codes, opt.array_n, v_bits));
  for (std::size_t l = 0; l < m.layers.size(); ++l) rep.cycles += layer_cycles(layout, l, n);
  rep.budget = opt.budget;
  if (opt.budget) {
    if (*opt.budget > 0.0) rep.violation = std::max(0.0, rep.empirical_mse / *opt.budget - 1.0);
    else rep.violation = rep.empirical_mse > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    rep.violated = rep.empirical_mse > *opt.budget;
  }
  return rep;
}

inline nlohmann::json report_to_json(const SimulationReport& r) {
  nlohmann::json j{{"mse", r.empirical_mse},
                   {"energy_saving", r.energy_saving},
                   {"cycles", r.cycles},
                   {"seed", r.seed},
                   {"mode", std::string(to_string(r.mode))},
                   {"samples", r.samples}};
  j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr);
  j["nominal_accuracy"] = r.nominal_accuracy ? nlohmann::json(*r.nominal_accuracy) : nlohmann::json(nullptr);
  j["budget"] = r.budget ? nlohmann::json(*r.budget) : nlohmann::json(nullptr);
  j["violation"] = {{"violated", r.violated},
                    {"relative", std::isfinite(r.violation) ? nlohmann::json(r.violation) : nlohmann::json("inf")}};
  return j;
}

}  // namespace xtpu
