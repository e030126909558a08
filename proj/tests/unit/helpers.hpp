#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xtpu/xtpu.hpp"

namespace testing_util {

inline std::filesystem::path data_path(const std::string& rel) { return std::filesystem::path(XTPU_DATA_DIR) / rel; }

inline xtpu::Layer make_layer(std::size_t in, std::size_t out, std::vector<int> w, std::vector<int> b,
                              xtpu::Activation act = xtpu::Activation::linear, double ws = 1.0, double as = 1.0) {
  xtpu::Layer L;
  L.inputs = in;
  L.outputs = out;
  for (int v : w) L.weights.push_back(static_cast<std::int8_t>(v));
  for (int v : b) L.biases.push_back(v);
  L.activation = act;
  L.weight_scale = ws;
  L.activation_scale = as;
  return L;
}

inline xtpu::QuantizedModel make_model(std::size_t input_size, std::vector<xtpu::Layer> layers,
                                       bool input_signed = false) {
  xtpu::QuantizedModel m;
  m.input_size = input_size;
  m.input_signed = input_signed;
  m.layers = std::move(layers);
  m.validate();
  return m;
}

inline xtpu::QuantizedModel identity_model(std::size_t n, bool input_signed = true) {
  std::vector<int> w(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1;
  return make_model(n, {make_layer(n, n, w, std::vector<int>(n, 0))}, input_signed);
}

/// All-linear network with random int8 weights. Each hidden activation scale
/// is set so typical pre-activations span most of the signed 8-bit range.
inline xtpu::QuantizedModel random_linear_model(const std::vector<std::size_t>& widths, xtpu::Rng& rng,
                                                int max_weight = 60) {
  std::uniform_int_distribution<int> wd(-max_weight, max_weight);
  std::vector<xtpu::Layer> layers;
  double in_scale = 1.0 / 255.0;
  double in_rms = 0.5;  // real rms of layer input
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l], out = widths[l + 1];
    std::vector<int> w(in * out), b(out, 0);
    for (auto& v : w) v = wd(rng);
    const double ws = 1.0 / 64.0;
    layers.push_back(make_layer(in, out, w, b, xtpu::Activation::linear, ws, in_scale));
    const double out_rms = in_rms * ws * max_weight / std::sqrt(3.0) * std::sqrt(static_cast<double>(in));
    in_rms = out_rms;
    in_scale = 3.0 * out_rms / 127.0;
  }
  return make_model(widths.front(), std::move(layers));
}

inline xtpu::Dataset random_dataset(std::size_t n, std::size_t width, std::size_t classes, xtpu::Rng& rng) {
  xtpu::Dataset d;
  d.input_size = width;
  std::uniform_int_distribution<int> px(0, 255), lab(0, static_cast<int>(classes) - 1);
  for (std::size_t i = 0; i < n * width; ++i) d.inputs.push_back(px(rng));
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(lab(rng));
  return d;
}

inline xtpu::ErrorModelTable variance_table() {
  return xtpu::fit_linear_scaling(
      xtpu::load_variance_table(data_path("pe_variance.csv"), {0.5, 0.6, 0.7, 0.8}));
}

}  // namespace testing_util
