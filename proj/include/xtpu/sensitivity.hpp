#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "xtpu/dataset.hpp"
#include "xtpu/error.hpp"
#include "xtpu/model.hpp"
#include "xtpu/parallel.hpp"
#include "xtpu/random.hpp"

namespace xtpu {

// Error sensitivity (ES) of neuron n to output o is the output deviation, in
// output-accumulator LSBs, per unit of error injected into n's accumulator
// (its own LSBs). An output neuron with linear activation therefore has
// ES[o][o] == 1.

enum class SensitivityMethod { analytic, monte_carlo, automatic };

inline std::string_view to_string(SensitivityMethod m) {
  switch (m) {
    case SensitivityMethod::analytic: return "analytic";
    case SensitivityMethod::monte_carlo: return "monte_carlo";
    case SensitivityMethod::automatic: return "auto";
  }
  return "auto";
}

inline SensitivityMethod parse_sensitivity_method(std::string_view s) {
  if (s == "analytic") return SensitivityMethod::analytic;
  if (s == "monte_carlo" || s == "mc") return SensitivityMethod::monte_carlo;
  if (s == "auto" || s == "automatic") return SensitivityMethod::automatic;
  fail(ErrorKind::config, "unknown sensitivity method '" + std::string(s) + "'");
}

struct SensitivityParams {
  std::size_t mc_samples = 10000;
  std::size_t calibration_samples = 256;
  /// MC injects N(0, (per_pe_std^2) * k_n) at neuron n, i.e. a full column of
  /// k_n PEs at the given per-PE spread.
  double injected_std_per_pe = 1.0;
  /// Approximate ReLU by a constant gain of 0.5 in analytic mode.
  bool relu_expected_gain = false;
  std::size_t threads = 0;  // 0: hardware concurrency
};

struct SensitivityMap {
  std::size_t outputs = 0;
  std::vector<NeuronRef> neurons;               // by global id
  std::vector<std::size_t> fan_in;              // k_n
  std::vector<double> es;                       // [neurons x outputs]
  std::vector<SensitivityMethod> method;        // analytic or monte_carlo, per neuron
  std::size_t mc_samples = 0;

  std::size_t size() const { return neurons.size(); }
  std::span<const double> row(std::size_t n) const { return {es.data() + n * outputs, outputs}; }
  double sum_squares(std::size_t n) const {
    double s = 0.0;
    for (double v : row(n)) s += v * v;
    return s;
  }
  /// Scalar per-neuron ES: L2 norm across outputs.
  double l2(std::size_t n) const { return std::sqrt(sum_squares(n)); }
};

// ---------------------------------------------------------------------------
// Analytic (linearized) sensitivity

namespace detail {

inline double linear_gain(Activation a, bool is_output_layer, bool relu_expected_gain) {
  switch (a) {
    case Activation::linear: return 1.0;
    case Activation::softmax:
      if (is_output_layer) return 1.0;  // outputs are taken before softmax
      break;
    case Activation::relu:
      if (relu_expected_gain) return 0.5;
      fail(ErrorKind::unsupported, "relu on the propagation path is data dependent; use the monte_carlo method");
    case Activation::sigmoid:
    case Activation::tanh: break;
  }
  fail(ErrorKind::unsupported,
       std::string(to_string(a)) + " activation is not linearizable; use the monte_carlo method");
}

}  // namespace detail

/// |effective gain| from neuron n's accumulator to each output accumulator,
/// treating requantization between layers as its ideal scale ratio.
inline std::vector<double> error_sensitivity_analytic(const QuantizedModel& m, NeuronRef neuron,
                                                      bool relu_expected_gain = false) {
  (void)m.neuron_id(neuron);  // validates
  const std::size_t last = m.layers.size() - 1;
  std::vector<double> delta(m.layers[neuron.layer].outputs, 0.0);
  delta[neuron.index] = 1.0;
  for (std::size_t l = neuron.layer;; ++l) {
    const Layer& L = m.layers[l];
    const double g = detail::linear_gain(L.activation, l == last, relu_expected_gain);
    if (l == last) {
      for (double& v : delta) v = std::abs(v * g);
      return delta;
    }
    const Layer& next = m.layers[l + 1];
    const double to_int = L.accumulator_lsb() * g / next.activation_scale;
    std::vector<double> nd(next.outputs, 0.0);
    for (std::size_t j = 0; j < L.outputs; ++j) {
      if (delta[j] == 0.0) continue;
      const double u = delta[j] * to_int;
      for (std::size_t o = 0; o < next.outputs; ++o) nd[o] += next.weight(o, j) * u;
    }
    delta = std::move(nd);
  }
}

// ---------------------------------------------------------------------------
// Monte-Carlo sensitivity

/// Clean forward passes of a calibration slice, cached so a single-neuron
/// perturbation only re-evaluates what it can reach.
class SensitivityProbe {
 public:
  SensitivityProbe(const QuantizedModel& m, const Dataset& calib) : model_(&m) {
    calib.validate();
    if (calib.input_size != m.input_size) fail(ErrorKind::dimension, "dataset width differs from model input_size");
    const std::size_t L = m.layers.size();
    samples_.resize(calib.size());
    for (std::size_t s = 0; s < calib.size(); ++s) {
      auto in = calib.input(s);
      check_input(m, in);
      Sample& c = samples_[s];
      c.x.resize(L);
      c.acc.resize(L);
      c.x[0].assign(in.begin(), in.end());
      for (std::size_t l = 0; l < L; ++l) {
        const Layer& layer = m.layers[l];
        c.acc[l].assign(layer.outputs, 0);
        accumulate(layer, c.x[l], c.acc[l]);
        auto real = layer_real(l, c.acc[l]);
        if (l + 1 < L) {
          c.x[l + 1] = requantize_layer(l, real);
        } else {
          c.outputs = output_from_real(l, real);
        }
      }
    }
  }

  std::size_t size() const { return samples_.size(); }

  /// Output deviation (output-accumulator LSBs) when `delta` is added to the
  /// accumulator of `neuron` for calibration sample `s`.
  void deviation(std::size_t s, NeuronRef neuron, double delta, std::vector<double>& dev) const {
    const QuantizedModel& m = *model_;
    const Sample& c = samples_[s];
    const std::size_t last = m.layers.size() - 1;
    dev.assign(m.output_size(), 0.0);
    const double out_lsb = m.output_lsb();
    const std::size_t l0 = neuron.layer;

    std::vector<double> z(c.acc[l0].size());
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = static_cast<double>(saturate32(c.acc[l0][j]));
    z[neuron.index] += delta;
    const Layer& L0 = m.layers[l0];
    if (l0 == last) {
      // only neuron.index changes (softmax, if any, is not applied to outputs)
      const double real = z[neuron.index] * L0.accumulator_lsb();
      const double out = L0.activation == Activation::softmax ? real : activation(L0.activation, real);
      dev[neuron.index] = (out - c.outputs[neuron.index]) / out_lsb;
      return;
    }
    // requantized change of the perturbed neuron (hidden layers are never softmax)
    const double real = z[neuron.index] * L0.accumulator_lsb();
    const std::int32_t q = requantize(activation(L0.activation, real), m.layers[l0 + 1].activation_scale,
                                      requant_range(L0.activation));
    const std::int64_t dq = static_cast<std::int64_t>(q) - c.x[l0 + 1][neuron.index];
    if (dq == 0) return;

    const Layer& L1 = m.layers[l0 + 1];
    std::vector<std::int64_t> acc = c.acc[l0 + 1];
    for (std::size_t o = 0; o < L1.outputs; ++o) acc[o] += static_cast<std::int64_t>(L1.weight(o, neuron.index)) * dq;
    for (std::size_t l = l0 + 1;; ++l) {
      auto r = layer_real(l, acc);
      if (l == last) {
        auto out = output_from_real(l, r);
        for (std::size_t o = 0; o < out.size(); ++o) dev[o] = (out[o] - c.outputs[o]) / out_lsb;
        return;
      }
      auto x = requantize_layer(l, r);
      const Layer& next = m.layers[l + 1];
      acc.assign(next.outputs, 0);
      accumulate(next, x, acc);
    }
  }

 private:
  struct Sample {
    std::vector<std::vector<std::int32_t>> x;    // integer input of each layer
    std::vector<std::vector<std::int64_t>> acc;  // clean accumulators (incl. bias)
    std::vector<double> outputs;
  };

  std::vector<double> layer_real(std::size_t l, const std::vector<std::int64_t>& acc) const {
    const Layer& L = model_->layers[l];
    std::vector<double> r(acc.size());
    for (std::size_t j = 0; j < acc.size(); ++j) r[j] = static_cast<double>(saturate32(acc[j])) * L.accumulator_lsb();
    return r;
  }

  std::vector<std::int32_t> requantize_layer(std::size_t l, const std::vector<double>& real) const {
    const Layer& L = model_->layers[l];
    const double scale = model_->layers[l + 1].activation_scale;
    const QuantRange rr = requant_range(L.activation);
    std::vector<std::int32_t> x(real.size());
    for (std::size_t j = 0; j < real.size(); ++j) x[j] = requantize(activation(L.activation, real[j]), scale, rr);
    return x;
  }

  std::vector<double> output_from_real(std::size_t l, std::vector<double> real) const {
    const Layer& L = model_->layers[l];
    if (L.activation != Activation::softmax)
      for (double& v : real) v = activation(L.activation, v);
    return real;
  }

  const QuantizedModel* model_;
  std::vector<Sample> samples_;
};

/// ES of one neuron by noise injection: RMS output deviation over `samples`
/// draws (cycling through the probe's calibration slice) divided by the
/// injected standard deviation.
inline std::vector<double> error_sensitivity_mc(const SensitivityProbe& probe, const QuantizedModel& m,
                                                NeuronRef neuron, double injected_std, std::size_t samples, Rng& rng) {
  (void)m.neuron_id(neuron);
  if (!(injected_std > 0.0)) fail(ErrorKind::range, "injected_std must be positive");
  if (samples < 100) fail(ErrorKind::insufficient, "Monte-Carlo sensitivity needs at least 100 samples");
  if (probe.size() == 0) fail(ErrorKind::insufficient, "empty calibration slice");
  std::normal_distribution<double> noise(0.0, injected_std);
  std::vector<double> sumsq(m.output_size(), 0.0), dev;
  for (std::size_t s = 0; s < samples; ++s) {
    probe.deviation(s % probe.size(), neuron, noise(rng), dev);
    for (std::size_t o = 0; o < dev.size(); ++o) sumsq[o] += dev[o] * dev[o];
  }
  for (double& v : sumsq) v = std::sqrt(v / static_cast<double>(samples)) / injected_std;
  return sumsq;
}

inline std::vector<double> error_sensitivity_mc(const QuantizedModel& m, const Dataset& data, NeuronRef neuron,
                                                double injected_std, std::size_t samples, Rng& rng,
                                                std::size_t calibration_samples = 256) {
  const SensitivityProbe probe(m, data.head(calibration_samples));
  return error_sensitivity_mc(probe, m, neuron, injected_std, samples, rng);
}

/// ES of every neuron. `automatic` uses the analytic route where every
/// activation on the path is linearizable and Monte-Carlo elsewhere. Each
/// neuron's MC stream is derived from (seed, neuron id), so results do not
/// depend on thread count.
inline SensitivityMap sensitivity_map(const QuantizedModel& m, const Dataset& data, SensitivityMethod method,
                                      const SensitivityParams& params, std::uint64_t seed) {
  m.validate();
  SensitivityMap map;
  map.outputs = m.output_size();
  const std::size_t n = m.neuron_count();
  for (std::size_t id = 0; id < n; ++id) map.neurons.push_back(m.neuron(id));
  map.fan_in = m.fan_ins();
  map.es.assign(n * map.outputs, 0.0);
  map.method.assign(n, SensitivityMethod::analytic);

  std::vector<char> needs_mc(n, method == SensitivityMethod::monte_carlo);
  if (method != SensitivityMethod::monte_carlo) {
    for (std::size_t id = 0; id < n; ++id) {
      try {
        auto es = error_sensitivity_analytic(m, map.neurons[id], params.relu_expected_gain);
        std::copy(es.begin(), es.end(), map.es.begin() + static_cast<std::ptrdiff_t>(id * map.outputs));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::unsupported || method == SensitivityMethod::analytic) throw;
        needs_mc[id] = 1;
      }
    }
  }
  if (std::find(needs_mc.begin(), needs_mc.end(), 1) == needs_mc.end()) return map;

  if (params.mc_samples < 100) fail(ErrorKind::config, "mc_samples must be at least 100");
  if (!(params.injected_std_per_pe > 0.0)) fail(ErrorKind::config, "injected_std_per_pe must be positive");
  const SensitivityProbe probe(m, data.head(params.calibration_samples));
  map.mc_samples = params.mc_samples;
  detail::parallel_for(n, params.threads, [&](std::size_t id) {
    if (!needs_mc[id]) return;
    Rng rng = child_rng(seed, id);
    const double sd = params.injected_std_per_pe * std::sqrt(static_cast<double>(map.fan_in[id]));
    auto es = error_sensitivity_mc(probe, m, map.neurons[id], sd, params.mc_samples, rng);
    std::copy(es.begin(), es.end(), map.es.begin() + static_cast<std::ptrdiff_t>(id * map.outputs));
    map.method[id] = SensitivityMethod::monte_carlo;
  });
  return map;
}

/// CSV: neuron_id,layer,index,k_n,es_l2,es_o0,...
inline void write_sensitivity_csv(std::ostream& os, const SensitivityMap& map) {
  os << "neuron_id,layer,index,k_n,es_l2";
  for (std::size_t o = 0; o < map.outputs; ++o) os << ",es_o" << o;
  os << '\n';
  os.precision(17);
  for (std::size_t id = 0; id < map.size(); ++id) {
    os << id << ',' << map.neurons[id].layer << ',' << map.neurons[id].index << ',' << map.fan_in[id] << ','
       << map.l2(id);
    for (double v : map.row(id)) os << ',' << v;
    os << '\n';
  }
}

}  // namespace xtpu
