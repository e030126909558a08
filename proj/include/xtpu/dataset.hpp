#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xtpu/error.hpp"
#include "xtpu/model.hpp"
#include "xtpu/random.hpp"

namespace xtpu {

/// Row-major integer inputs with either class labels or real regression targets.
struct Dataset {
  std::size_t input_size = 0;
  std::vector<std::int32_t> inputs;  // [size() x input_size]
  std::vector<int> labels;           // classification
  std::size_t target_width = 0;      // regression
  std::vector<double> targets;       // [size() x target_width]

  std::size_t size() const { return input_size == 0 ? 0 : inputs.size() / input_size; }
  bool is_classification() const { return !labels.empty(); }
  std::span<const std::int32_t> input(std::size_t i) const { return {inputs.data() + i * input_size, input_size}; }
  std::span<const double> target(std::size_t i) const { return {targets.data() + i * target_width, target_width}; }

  /// First `n` samples (all when n == 0 or n >= size()).
  Dataset head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    Dataset d;
    d.input_size = input_size;
    d.inputs.assign(inputs.begin(), inputs.begin() + static_cast<std::ptrdiff_t>(n * input_size));
    if (is_classification()) d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    if (target_width) {
      d.target_width = target_width;
      d.targets.assign(targets.begin(), targets.begin() + static_cast<std::ptrdiff_t>(n * target_width));
    }
    return d;
  }

  void validate() const {
    if (input_size == 0 || inputs.empty() || inputs.size() % input_size != 0)
      fail(ErrorKind::dimension, "dataset needs at least one complete input row");
    if (is_classification() && labels.size() != size())
      fail(ErrorKind::dimension, "dataset label count differs from input count");
    if (!is_classification() && (target_width == 0 || targets.size() != size() * target_width))
      fail(ErrorKind::dimension, "dataset needs labels or a full target matrix");
  }
};

// ---------------------------------------------------------------------------
// IDX (big-endian) reader

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> bytes;
  std::size_t payload_offset = 0;
};

inline IdxFile read_idx(const std::filesystem::path& p, std::uint32_t expected_magic) {
  IdxFile f;
  f.bytes = read_file(p);
  if (f.bytes.size() < 4) fail(ErrorKind::parse, p.string() + ": truncated IDX header");
  const std::uint32_t magic = be32(f.bytes, 0);
  if (magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08X (expected 0x%08X)", magic, expected_magic);
    fail(ErrorKind::parse, p.string() + ": " + buf);
  }
  const std::size_t ndims = magic & 0xFFu;
  if (f.bytes.size() < 4 + 4 * ndims) fail(ErrorKind::parse, p.string() + ": truncated IDX header");
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    f.dims.push_back(be32(f.bytes, 4 + 4 * d));
    count *= f.dims.back();
  }
  f.payload_offset = 4 + 4 * ndims;
  if (f.bytes.size() - f.payload_offset < count)
    fail(ErrorKind::parse, p.string() + ": truncated IDX payload (" + std::to_string(f.bytes.size() - f.payload_offset) +
                               " of " + std::to_string(count) + " bytes)");
  return f;
}

}  // namespace detail

/// Load an MNIST-style image/label pair. Pixel bytes are used directly as
/// unsigned 8-bit activations; the model's first activation_scale carries the
/// normalization.
inline Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = detail::read_idx(images, 0x00000803);
  const auto lab = detail::read_idx(labels, 0x00000801);
  const std::size_t n = img.dims[0];
  if (n == 0) fail(ErrorKind::parse, images.string() + ": no images");
  if (lab.dims[0] != n)
    fail(ErrorKind::parse, "image count " + std::to_string(n) + " != label count " + std::to_string(lab.dims[0]));
  Dataset d;
  d.input_size = std::size_t{img.dims[1]} * img.dims[2];
  d.inputs.assign(img.bytes.begin() + static_cast<std::ptrdiff_t>(img.payload_offset),
                  img.bytes.begin() + static_cast<std::ptrdiff_t>(img.payload_offset + n * d.input_size));
  d.labels.assign(lab.bytes.begin() + static_cast<std::ptrdiff_t>(lab.payload_offset),
                  lab.bytes.begin() + static_cast<std::ptrdiff_t>(lab.payload_offset + n));
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Cross-entropy for a single true class against a probability vector.
inline double cross_entropy(std::size_t true_class, std::span<const double> probabilities) {
  if (true_class >= probabilities.size()) fail(ErrorKind::range, "class index outside the output vector");
  const double p = probabilities[true_class];
  return p > 0.0 ? -std::log(p) : kInfiniteLoss;
}

inline void check_classification(const QuantizedModel& m, const Dataset& data) {
  if (!data.is_classification()) fail(ErrorKind::unsupported, "accuracy is only defined for classification data");
  if (data.input_size != m.input_size) fail(ErrorKind::dimension, "dataset width differs from model input_size");
}

inline double accuracy(const QuantizedModel& m, const Dataset& data) {
  check_classification(m, data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (static_cast<int>(argmax(forward(m, data.input(i)).outputs)) == data.labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

inline double accuracy(const QuantizedModel& m, const Dataset& data, const NoiseSpec& noise, Rng& rng) {
  check_classification(m, data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (static_cast<int>(argmax(forward(m, data.input(i), noise, rng).outputs)) == data.labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

/// Targets of sample i in the model's real output units: one-hot for
/// classification data, the stored row for regression data.
inline std::vector<double> target_vector(const Dataset& data, std::size_t i, std::size_t width) {
  if (data.is_classification()) {
    std::vector<double> t(width, 0.0);
    if (static_cast<std::size_t>(data.labels[i]) < width) t[static_cast<std::size_t>(data.labels[i])] = 1.0;
    return t;
  }
  auto t = data.target(i);
  if (t.size() != width) fail(ErrorKind::dimension, "regression target width differs from model output");
  return {t.begin(), t.end()};
}

/// Nominal output MSE against the targets, summed over output neurons and
/// averaged over samples, in squared output-accumulator LSBs.
inline double baseline_mse(const QuantizedModel& m, const Dataset& data) {
  data.validate();
  const double lsb = m.output_lsb();
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto out = forward(m, data.input(i)).outputs;
    const auto t = target_vector(data, i, out.size());
    for (std::size_t o = 0; o < out.size(); ++o) {
      const double d = (out[o] - t[o]) / lsb;
      s += d * d;
    }
  }
  return s / static_cast<double>(data.size());
}

}  // namespace xtpu
