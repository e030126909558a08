#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "xtpu/error.hpp"
#include "xtpu/random.hpp"

namespace xtpu {

enum class Activation { linear, relu, sigmoid, tanh, softmax };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::softmax: return "softmax";
  }
  return "linear";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "linear") return Activation::linear;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  if (s == "softmax") return Activation::softmax;
  fail(ErrorKind::parse, "unknown activation '" + std::string(s) + "'");
}

/// Scalar activation. Softmax is vector-valued and handled by `softmax()`;
/// its scalar form here is the identity on the logit.
inline double activation(Activation kind, double x) {
  switch (kind) {
    case Activation::linear: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid:
      // split on sign so exp never overflows
      if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
      {
        const double e = std::exp(x);
        return e / (1.0 + e);
      }
    case Activation::tanh: return std::tanh(x);
    case Activation::softmax: return x;
  }
  return x;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

/// Activations whose output is never negative are requantized to unsigned 8 bit.
constexpr bool nonnegative_output(Activation a) noexcept {
  return a == Activation::relu || a == Activation::sigmoid || a == Activation::softmax;
}

struct QuantRange {
  std::int32_t lo;
  std::int32_t hi;
};

constexpr QuantRange kUnsigned8{0, 255};
constexpr QuantRange kSigned8{-128, 127};

constexpr QuantRange requant_range(Activation producer) noexcept {
  return nonnegative_output(producer) ? kUnsigned8 : kSigned8;
}

constexpr std::int32_t saturate32(std::int64_t v) noexcept {
  constexpr std::int64_t lo = std::numeric_limits<std::int32_t>::min();
  constexpr std::int64_t hi = std::numeric_limits<std::int32_t>::max();
  return static_cast<std::int32_t>(v < lo ? lo : (v > hi ? hi : v));
}

/// One fully connected layer in int8 form. Real pre-activation of neuron j is
///   (sum_i W[j][i] * x[i] + b[j]) * weight_scale * activation_scale
/// where x holds the integer inputs of this layer and activation_scale is the
/// real value of one input LSB.
struct Layer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<std::int8_t> weights;  // row-major [outputs x inputs]
  std::vector<std::int32_t> biases;  // accumulator LSBs
  Activation activation = Activation::linear;
  double weight_scale = 1.0;
  double activation_scale = 1.0;

  std::int32_t weight(std::size_t out, std::size_t in) const { return weights[out * inputs + in]; }
  std::span<const std::int8_t> row(std::size_t out) const {
    return {weights.data() + out * inputs, inputs};
  }
  /// Real value of one accumulator LSB.
  double accumulator_lsb() const { return weight_scale * activation_scale; }
};

struct NeuronRef {
  std::size_t layer = 0;
  std::size_t index = 0;
  friend bool operator==(const NeuronRef&, const NeuronRef&) = default;
};

struct QuantizedModel {
  std::size_t input_size = 0;
  bool input_signed = false;
  std::vector<Layer> layers;
  std::map<std::string, std::string> metadata;

  std::size_t output_size() const { return layers.empty() ? input_size : layers.back().outputs; }

  std::size_t neuron_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.outputs;
    return n;
  }

  QuantRange input_range() const { return input_signed ? kSigned8 : kUnsigned8; }

  /// Global neuron id: layers in order, neurons in index order within a layer.
  std::size_t neuron_id(NeuronRef ref) const {
    if (ref.layer >= layers.size() || ref.index >= layers[ref.layer].outputs)
      fail(ErrorKind::range, "neuron (" + std::to_string(ref.layer) + "," + std::to_string(ref.index) +
                                 ") does not exist");
    std::size_t id = 0;
    for (std::size_t l = 0; l < ref.layer; ++l) id += layers[l].outputs;
    return id + ref.index;
  }

  NeuronRef neuron(std::size_t id) const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (id < layers[l].outputs) return {l, id};
      id -= layers[l].outputs;
    }
    fail(ErrorKind::range, "neuron id out of range");
  }

  /// Fan-in (PEs per column) of every neuron, by global id.
  std::vector<std::size_t> fan_ins() const {
    std::vector<std::size_t> k;
    k.reserve(neuron_count());
    for (const auto& l : layers) k.insert(k.end(), l.outputs, l.inputs);
    return k;
  }

  /// Real value of one LSB of the network output accumulators.
  double output_lsb() const { return layers.back().accumulator_lsb(); }

  void validate() const {
    if (layers.empty()) fail(ErrorKind::dimension, "model has no layers");
    if (input_size == 0) fail(ErrorKind::dimension, "model input_size must be positive");
    std::size_t width = input_size;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Layer& L = layers[l];
      const std::string where = "layer " + std::to_string(l) + ": ";
      if (L.inputs != width)
        fail(ErrorKind::dimension, where + "input width " + std::to_string(L.inputs) + " != previous width " +
                                       std::to_string(width));
      if (L.outputs == 0) fail(ErrorKind::dimension, where + "zero outputs");
      if (L.weights.size() != L.inputs * L.outputs) fail(ErrorKind::dimension, where + "weight matrix size");
      if (L.biases.size() != L.outputs) fail(ErrorKind::dimension, where + "bias vector size");
      if (!(L.weight_scale > 0.0) || !std::isfinite(L.weight_scale))
        fail(ErrorKind::range, where + "weight_scale must be positive");
      if (!(L.activation_scale > 0.0) || !std::isfinite(L.activation_scale))
        fail(ErrorKind::range, where + "activation_scale must be positive");
      if (L.activation == Activation::softmax && l + 1 != layers.size())
        fail(ErrorKind::unsupported, where + "softmax is only supported on the output layer");
      width = L.outputs;
    }
  }
};

// ---------------------------------------------------------------------------
// Model file (JSON)

inline QuantizedModel model_from_json(const nlohmann::json& doc) {
  QuantizedModel m;
  try {
    m.input_size = doc.at("input_size").get<std::size_t>();
    m.input_signed = doc.value("input_signed", false);
    if (doc.contains("metadata"))
      for (const auto& [k, v] : doc.at("metadata").items())
        m.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
    std::size_t width = m.input_size;
    for (const auto& jl : doc.at("layers")) {
      Layer L;
      L.activation = parse_activation(jl.at("activation").get<std::string>());
      L.weight_scale = jl.at("weight_scale").get<double>();
      L.activation_scale = jl.at("activation_scale").get<double>();
      const auto& rows = jl.at("weights");
      L.outputs = rows.size();
      L.inputs = rows.empty() ? 0 : rows.front().size();
      if (L.inputs != width)
        fail(ErrorKind::dimension, "layer " + std::to_string(m.layers.size()) + " expects " +
                                       std::to_string(width) + " inputs, weight rows have " +
                                       std::to_string(L.inputs));
      L.weights.reserve(L.inputs * L.outputs);
      for (const auto& r : rows) {
        if (r.size() != L.inputs) fail(ErrorKind::dimension, "ragged weight matrix");
        for (const auto& v : r) {
          const auto w = v.get<std::int64_t>();
          if (w < -128 || w > 127)
            fail(ErrorKind::range, "weight " + std::to_string(w) + " outside int8 range [-128, 127]");
          L.weights.push_back(static_cast<std::int8_t>(w));
        }
      }
      for (const auto& v : jl.at("biases")) {
        const auto b = v.get<std::int64_t>();
        if (b < std::numeric_limits<std::int32_t>::min() || b > std::numeric_limits<std::int32_t>::max())
          fail(ErrorKind::range, "bias " + std::to_string(b) + " does not fit a 32-bit accumulator");
        L.biases.push_back(static_cast<std::int32_t>(b));
      }
      width = L.outputs;
      m.layers.push_back(std::move(L));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("model document: ") + e.what());
  }
  m.validate();
  return m;
}

inline nlohmann::json model_to_json(const QuantizedModel& m) {
  nlohmann::json doc;
  doc["input_size"] = m.input_size;
  if (m.input_signed) doc["input_signed"] = true;
  if (!m.metadata.empty()) doc["metadata"] = m.metadata;
  doc["layers"] = nlohmann::json::array();
  for (const auto& L : m.layers) {
    nlohmann::json jl;
    jl["activation"] = to_string(L.activation);
    jl["weight_scale"] = L.weight_scale;
    jl["activation_scale"] = L.activation_scale;
    jl["biases"] = L.biases;
    auto rows = nlohmann::json::array();
    for (std::size_t o = 0; o < L.outputs; ++o) {
      auto r = L.row(o);
      rows.push_back(std::vector<int>(r.begin(), r.end()));
    }
    jl["weights"] = std::move(rows);
    doc["layers"].push_back(std::move(jl));
  }
  return doc;
}

inline QuantizedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open model file " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, "model file " + path.string() + ": " + e.what());
  }
  return model_from_json(doc);
}

// ---------------------------------------------------------------------------
// Noise specification (accumulator LSBs, pre-activation)

struct NeuronNoise {
  double mean = 0.0;
  double variance = 0.0;
  bool active() const { return mean != 0.0 || variance > 0.0; }
};

class NoiseSpec {
 public:
  NoiseSpec() = default;
  explicit NoiseSpec(const QuantizedModel& m) {
    per_layer_.reserve(m.layers.size());
    for (const auto& l : m.layers) per_layer_.emplace_back(l.outputs);
  }

  void set(NeuronRef ref, NeuronNoise n) {
    if (ref.layer >= per_layer_.size() || ref.index >= per_layer_[ref.layer].size())
      fail(ErrorKind::range, "noise spec names a neuron outside the model");
    if (n.variance < 0.0) fail(ErrorKind::range, "noise variance must be nonnegative");
    per_layer_[ref.layer][ref.index] = n;
  }
  const NeuronNoise& at(NeuronRef ref) const { return per_layer_.at(ref.layer).at(ref.index); }
  std::span<const NeuronNoise> layer(std::size_t l) const { return per_layer_.at(l); }

  bool matches(const QuantizedModel& m) const {
    if (per_layer_.size() != m.layers.size()) return false;
    for (std::size_t l = 0; l < m.layers.size(); ++l)
      if (per_layer_[l].size() != m.layers[l].outputs) return false;
    return true;
  }

 private:
  std::vector<std::vector<NeuronNoise>> per_layer_;
};

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardResult {
  std::vector<double> outputs;                    // final layer, pre-softmax
  std::vector<std::vector<double>> accumulators;  // per layer, accumulator LSBs incl. injected noise
  std::vector<std::vector<double>> layer_outputs; // per layer, real post-activation (softmax applied)
};

/// Exact integer accumulation: sum_i W[j][i] * x[i] + b[j] in 64 bits.
inline void accumulate(const Layer& L, std::span<const std::int32_t> x, std::span<std::int64_t> acc) {
  for (std::size_t j = 0; j < L.outputs; ++j) {
    const std::int8_t* w = L.weights.data() + j * L.inputs;
    std::int64_t s = 0;
    for (std::size_t i = 0; i < L.inputs; ++i) s += static_cast<std::int64_t>(w[i]) * x[i];
    acc[j] = s + L.biases[j];
  }
}

inline std::int32_t requantize(double real, double scale, QuantRange r) {
  const double q = std::round(real / scale);
  if (!(q >= r.lo)) return r.lo;  // also catches NaN
  if (q > r.hi) return r.hi;
  return static_cast<std::int32_t>(q);
}

inline void check_input(const QuantizedModel& m, std::span<const std::int32_t> input) {
  if (input.size() != m.input_size)
    fail(ErrorKind::dimension, "input length " + std::to_string(input.size()) + " != model input_size " +
                                   std::to_string(m.input_size));
  const QuantRange r = m.input_range();
  for (auto v : input)
    if (v < r.lo || v > r.hi)
      fail(ErrorKind::range, "input value " + std::to_string(v) + " outside the quantized input range");
}

namespace detail {

/// Evaluate layers [first, end) given the integer input of layer `first`.
/// `pre(l, x, z)` fills z with layer l's accumulator (LSBs) for input x.
template <class PreFn>
void run_layers_with(const QuantizedModel& m, std::size_t first, std::vector<std::int32_t> x, PreFn&& pre,
                     ForwardResult& out) {
  for (std::size_t l = first; l < m.layers.size(); ++l) {
    const Layer& L = m.layers[l];
    std::vector<double> z(L.outputs);
    pre(l, std::span<const std::int32_t>(x), z);
    const double lsb = L.accumulator_lsb();
    std::vector<double> real(L.outputs);
    for (std::size_t j = 0; j < L.outputs; ++j) real[j] = z[j] * lsb;
    std::vector<double> post;
    if (L.activation == Activation::softmax) {
      post = softmax(real);
    } else {
      post.resize(L.outputs);
      for (std::size_t j = 0; j < L.outputs; ++j) post[j] = activation(L.activation, real[j]);
    }
    const bool last = l + 1 == m.layers.size();
    if (last) {
      out.outputs = L.activation == Activation::softmax ? real : post;
    } else {
      const double next_scale = m.layers[l + 1].activation_scale;
      const QuantRange r = requant_range(L.activation);
      x.resize(L.outputs);
      for (std::size_t j = 0; j < L.outputs; ++j) x[j] = requantize(post[j], next_scale, r);
    }
    out.accumulators[l] = std::move(z);
    out.layer_outputs[l] = std::move(post);
  }
}

/// Exact accumulation, saturated to 32 bits, plus `noise(l, j)` per neuron.
template <class NoiseFn>
void run_layers(const QuantizedModel& m, std::size_t first, std::vector<std::int32_t> x, NoiseFn&& noise,
                ForwardResult& out) {
  std::vector<std::int64_t> acc;
  run_layers_with(
      m, first, std::move(x),
      [&](std::size_t l, std::span<const std::int32_t> in, std::vector<double>& z) {
        const Layer& L = m.layers[l];
        acc.assign(L.outputs, 0);
        accumulate(L, in, acc);
        for (std::size_t j = 0; j < L.outputs; ++j) z[j] = static_cast<double>(saturate32(acc[j])) + noise(l, j);
      },
      out);
}

}  // namespace detail

/// Noise-free forward pass. Pure: identical inputs give bit-identical outputs.
inline ForwardResult forward(const QuantizedModel& m, std::span<const std::int32_t> input) {
  check_input(m, input);
  ForwardResult r;
  r.accumulators.resize(m.layers.size());
  r.layer_outputs.resize(m.layers.size());
  detail::run_layers(m, 0, {input.begin(), input.end()}, [](std::size_t, std::size_t) { return 0.0; }, r);
  return r;
}

/// Forward pass with Gaussian noise added to each neuron's accumulator before
/// its activation. Draws happen layer by layer, neuron by neuron, and only for
/// neurons with active noise, so results are reproducible from the rng state.
inline ForwardResult forward(const QuantizedModel& m, std::span<const std::int32_t> input, const NoiseSpec& noise,
                             Rng& rng) {
  check_input(m, input);
  if (!noise.matches(m)) fail(ErrorKind::dimension, "noise spec does not match the model's layer widths");
  ForwardResult r;
  r.accumulators.resize(m.layers.size());
  r.layer_outputs.resize(m.layers.size());
  std::normal_distribution<double> unit(0.0, 1.0);
  detail::run_layers(
      m, 0, {input.begin(), input.end()},
      [&](std::size_t l, std::size_t j) {
        const NeuronNoise& n = noise.layer(l)[j];
        if (!n.active()) return 0.0;
        return n.mean + std::sqrt(n.variance) * unit(rng);
      },
      r);
  return r;
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { mae, mse, mred, ce };

inline constexpr double kInfiniteLoss = std::numeric_limits<double>::infinity();

inline double loss(LossKind kind, std::span<const double> targets, std::span<const double> outputs) {
  if (targets.size() != outputs.size())
    fail(ErrorKind::dimension, "loss: targets and outputs differ in length");
  if (targets.empty()) fail(ErrorKind::dimension, "loss: empty vectors");
  const double n = static_cast<double>(targets.size());
  switch (kind) {
    case LossKind::mae: {
      double s = 0.0;
      for (std::size_t i = 0; i < targets.size(); ++i) s += std::abs(targets[i] - outputs[i]);
      return s / n;
    }
    case LossKind::mse: {
      double s = 0.0;
      for (std::size_t i = 0; i < targets.size(); ++i) s += (targets[i] - outputs[i]) * (targets[i] - outputs[i]);
      return s / n;
    }
    case LossKind::mred: {
      // zero targets are skipped; the mean runs over the nonzero ones
      double s = 0.0;
      std::size_t used = 0;
      for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == 0.0) continue;
        s += std::abs((targets[i] - outputs[i]) / targets[i]);
        ++used;
      }
      return used == 0 ? kInfiniteLoss : s / static_cast<double>(used);
    }
    case LossKind::ce: {
      double s = 0.0;
      for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == 0.0) continue;
        if (!(outputs[i] > 0.0)) return kInfiniteLoss;
        s -= targets[i] * std::log(outputs[i]);
      }
      return s;
    }
  }
  return 0.0;
}

}  // namespace xtpu
