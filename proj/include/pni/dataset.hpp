#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pni/tensor.hpp"

namespace pni {

/// Labelled images in [0, 1], stored sample-major as [N x C x H x W].
struct Dataset {
  Shape sample_shape;  // [C, H, W]
  std::vector<double> inputs;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string split = "train";

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return numel(sample_shape); }

  /// Throws ConfigError if inputs leave [0, 1], labels leave [0, classes) or
  /// sizes disagree.
  void validate() const;

  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// Contiguous samples [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const;
  Tensor all_inputs() const;
};

/// Reads an IDX image file (magic 0x00000803, u8 pixels) and label file
/// (magic 0x00000801). Pixels are divided by 255. `classes` = 0 infers the
/// class count from the largest label. Throws FormatError with the byte
/// offset of the first malformed field.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 const std::string& split = "train", std::size_t classes = 0);
/// Same parser over in-memory buffers.
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  const std::string& split = "train", std::size_t classes = 0);

/// Writes pixels as round(255 * x).
void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

/// K-class Gaussian-blob image task.
///
/// Class k's mean image is a Gaussian bump of width `blob_width * H` centred
/// at angle 2 pi k / K on a circle of radius `ring_radius * H` around the
/// image centre. A sample jitters the centre by N(0, jitter^2) pixels, scales
/// the bump by U[amplitude_min, 1], adds N(0, pixel_noise^2) per pixel and
/// clips to [0, 1]. Labels are balanced (sample i has class i mod K before
/// shuffling).
struct SyntheticConfig {
  std::size_t classes = 10;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t samples = 1000;
  double ring_radius = 0.3;
  double blob_width = 0.1;
  double jitter = 0.5;
  double amplitude_min = 0.6;
  double pixel_noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

Dataset make_synthetic(const SyntheticConfig& config, const std::string& split = "train");

/// Mean image of class k (noise-free, unit amplitude).
std::vector<double> synthetic_class_mean(const SyntheticConfig& config, std::size_t k);

}  // namespace pni
