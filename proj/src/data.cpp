#include "sskd/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "sskd/binary_io.hpp"
#include "sskd/errors.hpp"
#include "sskd/random.hpp"

namespace sskd {

namespace {

constexpr char kDatasetMagic[] = "SKDS";
constexpr std::uint16_t kDatasetVersion = 1;

float quantize(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(clamped * 255.0)) / 255.0f;
}

struct Grating {
  double theta;
  double cycles;
};

Grating grating_for(int cls, int num_classes) {
  const int bands = std::max(1, static_cast<int>(std::lround(std::sqrt(num_classes / 2.0))));
  const int orientations = (num_classes + bands - 1) / bands;
  const int o = cls % orientations;
  const int band = cls / orientations;
  return {std::numbers::pi * o / orientations, 2.0 + 2.0 * band};
}

void render_template(const SyntheticSpec& spec, int cls, float* out) {
  const Grating g = grating_for(cls, spec.num_classes);
  const int r = spec.resolution;
  const double c = std::cos(g.theta), s = std::sin(g.theta);
  for (int ch = 0; ch < spec.channels; ++ch) {
    const double phase = 2.0 * std::numbers::pi * ch / spec.channels;
    for (int y = 0; y < r; ++y) {
      for (int x = 0; x < r; ++x) {
        const double u = (x * c + y * s) / r;
        const double v = 0.5 + spec.contrast * std::sin(2.0 * std::numbers::pi * g.cycles * u + phase);
        out[(static_cast<std::size_t>(ch) * r + y) * r + x] = static_cast<float>(v);
      }
    }
  }
}

Dataset render_split(const SyntheticSpec& spec, const TensorF& templates, Split split) {
  const int n = spec.num_classes * spec.samples_per_class;
  const std::size_t per = static_cast<std::size_t>(spec.channels) * spec.resolution * spec.resolution;
  Dataset out;
  out.num_classes = spec.num_classes;
  out.split = split;
  out.images = TensorF({n, spec.channels, spec.resolution, spec.resolution}, 0.0f);
  out.labels.resize(static_cast<std::size_t>(n));
  auto rng = make_rng(spec.seed, split == Split::kTrain ? "synthetic-train-noise" : "synthetic-test-noise");
  std::normal_distribution<double> noise(0.0, 1.0);
  float* dst = out.images.data();
  const float* tpl = templates.data();
  for (int i = 0; i < n; ++i) {
    const int cls = i % spec.num_classes;
    out.labels[static_cast<std::size_t>(i)] = cls;
    const float* t = tpl + static_cast<std::size_t>(cls) * per;
    float* d = dst + static_cast<std::size_t>(i) * per;
    for (std::size_t k = 0; k < per; ++k) {
      const double eps = spec.noise_std > 0.0 ? spec.noise_std * noise(rng) : 0.0;
      d[k] = quantize(t[k] + eps);
    }
  }
  return out;
}

}  // namespace

void Dataset::validate() const {
  if (images.rank() != 4) throw ValidationError("dataset images must be [N, C, H, W], got " + to_string(images.shape()));
  if (images.dim(0) != size()) {
    throw ValidationError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                          std::to_string(size()) + " labels");
  }
  if (num_classes < 1) throw ValidationError("dataset num_classes must be >= 1");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                            " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

void SyntheticSpec::validate() const {
  if (num_classes < 1) throw ConfigError("synthetic num_classes must be >= 1");
  if (samples_per_class < 1) throw ConfigError("synthetic samples_per_class must be >= 1");
  if (resolution < 8) throw ConfigError("synthetic resolution must be >= 8, got " + std::to_string(resolution));
  if (channels < 1) throw ConfigError("synthetic channels must be >= 1");
  if (!(noise_std >= 0.0)) throw ConfigError("synthetic noise_std must be >= 0");
  if (!(contrast >= 0.0 && contrast <= 0.5)) throw ConfigError("synthetic contrast must lie in [0, 0.5]");
}

TensorF synthetic_templates(const SyntheticSpec& spec) {
  spec.validate();
  TensorF out({spec.num_classes, spec.channels, spec.resolution, spec.resolution}, 0.0f);
  const std::size_t per = static_cast<std::size_t>(spec.channels) * spec.resolution * spec.resolution;
  for (int c = 0; c < spec.num_classes; ++c) render_template(spec, c, out.data() + c * per);
  return out;
}

SyntheticData gen_synthetic(const SyntheticSpec& spec) {
  const TensorF templates = synthetic_templates(spec);
  return {render_split(spec, templates, Split::kTrain), render_split(spec, templates, Split::kTest)};
}

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  dataset.validate();
  const auto fits16 = [](int v) { return v >= 0 && v <= 0xFFFF; };
  if (!fits16(dataset.channels()) || !fits16(dataset.height()) || !fits16(dataset.width()) ||
      !fits16(dataset.num_classes) || dataset.num_classes > 256) {
    throw ValidationError("dataset extents do not fit the binary format");
  }
  ByteWriter w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(dataset.size()));
  w.u16(static_cast<std::uint16_t>(dataset.channels()));
  w.u16(static_cast<std::uint16_t>(dataset.height()));
  w.u16(static_cast<std::uint16_t>(dataset.width()));
  w.u16(static_cast<std::uint16_t>(dataset.num_classes));
  std::vector<std::uint8_t> pixels(dataset.images.size());
  const float* src = dataset.images.data();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const float v = src[i];
    if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("pixel value outside [0, 1] at element " + std::to_string(i));
    pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  w.raw(pixels);
  for (int label : dataset.labels) w.u8(static_cast<std::uint8_t>(label));
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes, Split split) {
  ByteReader r(bytes);
  if (r.raw(4, "magic") != std::string_view(kDatasetMagic, 4)) throw ParseError(0, "bad magic, expected \"SKDS\"");
  const std::size_t version_at = r.offset();
  const std::uint16_t version = r.u16();
  if (version != kDatasetVersion) {
    throw ParseError(version_at, "unsupported dataset version " + std::to_string(version));
  }
  const std::uint32_t n = r.u32();
  const std::uint16_t c = r.u16(), h = r.u16(), w = r.u16();
  const std::size_t classes_at = r.offset();
  const std::uint16_t num_classes = r.u16();
  if (n == 0 || c == 0 || h == 0 || w == 0) throw ParseError(6, "dataset header has a zero extent");
  if (num_classes == 0) throw ParseError(classes_at, "dataset header has num_classes = 0");

  const std::size_t pixel_count = static_cast<std::size_t>(n) * c * h * w;
  const std::size_t expected = r.offset() + pixel_count + n;
  if (bytes.size() != expected) {
    throw ParseError(std::min(bytes.size(), expected), "dataset length mismatch: expected " +
                                                           std::to_string(expected) + " bytes, got " +
                                                           std::to_string(bytes.size()));
  }
  Dataset out;
  out.num_classes = num_classes;
  out.split = split;
  out.images = TensorF({static_cast<int>(n), c, h, w}, 0.0f);
  const auto pixels = r.span(pixel_count, "pixels");
  float* dst = out.images.data();
  for (std::size_t i = 0; i < pixel_count; ++i) dst[i] = static_cast<float>(pixels[i]) / 255.0f;
  out.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) out.labels[i] = r.u8();
  out.validate();
  return out;
}

void save_binary(const Dataset& dataset, const std::filesystem::path& path) {
  write_file(path, encode_dataset(dataset));
}

Dataset load_binary(const std::filesystem::path& path, Split split) {
  return decode_dataset(read_file(path), split);
}

std::vector<std::vector<std::size_t>> batches(int dataset_size, int batch_size, std::uint64_t shuffle_seed,
                                              int epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (dataset_size < 0) throw ConfigError("dataset size must be >= 0");
  std::vector<std::size_t> order(static_cast<std::size_t>(dataset_size));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
  // Explicit Fisher-Yates so the order does not depend on the standard library's distributions.
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

ChannelStats channel_stats(const Dataset& dataset) {
  const int n = dataset.size(), c = dataset.channels();
  const std::size_t plane = static_cast<std::size_t>(dataset.height()) * dataset.width();
  ChannelStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const float* src = dataset.images.data();
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0, ss = 0.0;
    for (int i = 0; i < n; ++i) {
      const float* p = src + (static_cast<std::size_t>(i) * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        s += p[k];
        ss += static_cast<double>(p[k]) * p[k];
      }
    }
    const double count = static_cast<double>(n) * plane;
    const double mean = s / count;
    stats.mean[ch] = mean;
    stats.std[ch] = std::sqrt(std::max(ss / count - mean * mean, 0.0));
    if (stats.std[ch] < 1e-6) stats.std[ch] = 1.0;
  }
  return stats;
}

}  // namespace sskd
