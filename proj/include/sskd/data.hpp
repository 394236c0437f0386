#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sskd/tensor.hpp"

namespace sskd {

enum class Split { kTrain, kTest };

struct Dataset {
  TensorF images;           // [N, C, H, W], values in [0, 1]
  std::vector<int> labels;  // N entries in [0, num_classes)
  int num_classes = 0;
  Split split = Split::kTrain;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
  // Throws ValidationError if the invariants do not hold.
  void validate() const;
};

struct SyntheticSpec {
  int num_classes = 10;
  int samples_per_class = 200;  // per split
  int resolution = 32;
  int channels = 3;
  double noise_std = 0.3;
  // Peak deviation of the grating from mid-grey.
  double contrast = 0.25;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
};

// Class c is an oriented sinusoidal grating whose orientation and spatial
// frequency are functions of c (orientations cycle fastest, frequency bands
// change every `orientations` classes), with a per-channel phase offset.
// Seeded Gaussian noise is added independently for the two splits, values
// are clamped to [0, 1] and quantized to multiples of 1/255.
SyntheticData gen_synthetic(const SyntheticSpec& spec);

// Noise-free class templates [num_classes, C, H, W].
TensorF synthetic_templates(const SyntheticSpec& spec);

// "SKDS" little-endian format; see README for the byte layout.
std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const std::uint8_t> bytes, Split split = Split::kTrain);
void save_binary(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_binary(const std::filesystem::path& path, Split split = Split::kTrain);

// Sample indices grouped into batches. The order is a pure function of
// (shuffle_seed, epoch); the final partial batch is kept.
std::vector<std::vector<std::size_t>> batches(int dataset_size, int batch_size, std::uint64_t shuffle_seed,
                                              int epoch);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

ChannelStats channel_stats(const Dataset& dataset);

}  // namespace sskd
