#include "pni/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "pni/error.hpp"
#include "pni/rng.hpp"

namespace pni {
namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::string what;
  std::size_t pos = 0;

  std::uint32_t u32() {
    if (bytes.size() - pos < 4 || pos > bytes.size()) {
      throw FormatError(what + ": truncated header", bytes.size());
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes[pos++];
    return v;
  }
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string(), "path");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_u32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

void Dataset::validate() const {
  if (sample_shape.size() != 3) throw ConfigError("sample shape must be [C, H, W]", "dataset");
  if (inputs.size() != labels.size() * sample_size()) throw ConfigError("input and label counts disagree", "dataset");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!(inputs[i] >= 0.0 && inputs[i] <= 1.0)) {
      throw ConfigError("input " + std::to_string(i) + " outside [0, 1]", "dataset");
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ConfigError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                            " outside [0, " + std::to_string(classes) + ")",
                        "dataset");
    }
  }
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t d = sample_size();
  std::vector<double> out;
  out.reserve(indices.size() * d);
  for (std::size_t i : indices) {
    if (i >= size()) throw IndexError("sample " + std::to_string(i) + " out of range");
    out.insert(out.end(), inputs.begin() + static_cast<std::ptrdiff_t>(i * d),
               inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor(std::move(shape), std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw IndexError("slice past the end of the dataset");
  const std::size_t d = sample_size();
  Dataset out{sample_shape, {}, {}, classes, split};
  out.inputs.assign(inputs.begin() + static_cast<std::ptrdiff_t>(begin * d),
                    inputs.begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
  return out;
}

Tensor Dataset::all_inputs() const {
  Shape shape{size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor(std::move(shape), inputs);
}

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  const std::string& split, std::size_t classes) {
  Reader img{images, "image file"};
  if (img.u32() != kImageMagic) throw FormatError("image file: bad magic", 0);
  const std::uint32_t n = img.u32(), h = img.u32(), w = img.u32();
  if (h == 0 || w == 0) throw FormatError("image file: zero image extent", h == 0 ? 8 : 12);
  const std::size_t pixels = static_cast<std::size_t>(n) * h * w;
  if (images.size() - img.pos < pixels) throw FormatError("image file: truncated payload", images.size());

  Reader lab{labels, "label file"};
  if (lab.u32() != kLabelMagic) throw FormatError("label file: bad magic", 0);
  const std::uint32_t m = lab.u32();
  if (m != n) {
    throw FormatError("label file holds " + std::to_string(m) + " labels for " + std::to_string(n) + " images", 4);
  }
  if (labels.size() - lab.pos < m) throw FormatError("label file: truncated payload", labels.size());

  Dataset out;
  out.sample_shape = {1, h, w};
  out.split = split;
  out.inputs.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i) out.inputs[i] = images[img.pos + i] / 255.0;
  out.labels.resize(m);
  std::uint8_t max_label = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint8_t v = labels[lab.pos + i];
    if (classes > 0 && v >= classes) {
      throw FormatError("label " + std::to_string(v) + " outside " + std::to_string(classes) + " classes", lab.pos + i);
    }
    out.labels[i] = v;
    max_label = std::max(max_label, v);
  }
  out.classes = classes > 0 ? classes : (m > 0 ? max_label + 1u : 0u);
  return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const std::string& split,
                 std::size_t classes) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  return parse_idx(img, lab, split, classes);
}

void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (data.sample_shape.size() != 3 || data.sample_shape[0] != 1) {
    throw DimensionError("IDX stores single-channel images, got sample shape " + to_string(data.sample_shape));
  }
  std::ofstream img(images, std::ios::binary), lab(labels, std::ios::binary);
  if (!img || !lab) throw ConfigError("cannot write IDX files", "path");
  write_u32(img, kImageMagic);
  write_u32(img, static_cast<std::uint32_t>(data.size()));
  write_u32(img, static_cast<std::uint32_t>(data.sample_shape[1]));
  write_u32(img, static_cast<std::uint32_t>(data.sample_shape[2]));
  for (double v : data.inputs) img.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  write_u32(lab, kLabelMagic);
  write_u32(lab, static_cast<std::uint32_t>(data.size()));
  for (int v : data.labels) lab.put(static_cast<char>(static_cast<std::uint8_t>(v)));
}

void SyntheticConfig::validate() const {
  if (classes < 2) throw ConfigError("need at least two classes", "synthetic.classes");
  if (classes > 255) throw ConfigError("at most 255 classes", "synthetic.classes");
  if (height == 0 || width == 0) throw ConfigError("image extent must be positive", "synthetic.height");
  if (!(blob_width > 0.0)) throw ConfigError("must be > 0", "synthetic.blob_width");
  if (!(amplitude_min > 0.0 && amplitude_min <= 1.0)) throw ConfigError("must lie in (0, 1]", "synthetic.amplitude_min");
  if (!(pixel_noise >= 0.0)) throw ConfigError("must be >= 0", "synthetic.pixel_noise");
  if (!(jitter >= 0.0)) throw ConfigError("must be >= 0", "synthetic.jitter");
}

namespace {

void draw_blob(std::vector<double>& img, const SyntheticConfig& c, double cy, double cx, double amplitude) {
  const double s = c.blob_width * static_cast<double>(c.height);
  for (std::size_t y = 0; y < c.height; ++y)
    for (std::size_t x = 0; x < c.width; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      img[y * c.width + x] += amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * s * s));
    }
}

std::pair<double, double> class_centre(const SyntheticConfig& c, std::size_t k) {
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(c.classes);
  const double r = c.ring_radius * static_cast<double>(c.height);
  return {0.5 * static_cast<double>(c.height - 1) + r * std::sin(angle),
          0.5 * static_cast<double>(c.width - 1) + r * std::cos(angle)};
}

}  // namespace

std::vector<double> synthetic_class_mean(const SyntheticConfig& config, std::size_t k) {
  config.validate();
  std::vector<double> img(config.height * config.width, 0.0);
  const auto [cy, cx] = class_centre(config, k);
  draw_blob(img, config, cy, cx, 1.0);
  return img;
}

Dataset make_synthetic(const SyntheticConfig& config, const std::string& split) {
  config.validate();
  Rng rng = Rng(config.seed).derive(split == "train" ? 0 : 1);
  std::vector<int> labels(config.samples);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % config.classes);
  rng.shuffle(labels);

  Dataset out;
  out.sample_shape = {1, config.height, config.width};
  out.classes = config.classes;
  out.split = split;
  out.labels = labels;
  const std::size_t d = config.height * config.width;
  out.inputs.reserve(config.samples * d);
  for (int label : labels) {
    auto [cy, cx] = class_centre(config, static_cast<std::size_t>(label));
    const auto shift = rng.normals(2);
    const double amplitude = config.amplitude_min + (1.0 - config.amplitude_min) * rng.uniform();
    std::vector<double> img(d, 0.0);
    draw_blob(img, config, cy + config.jitter * shift[0], cx + config.jitter * shift[1], amplitude);
    const auto noise = rng.normals(d);
    for (std::size_t j = 0; j < d; ++j) out.inputs.push_back(std::clamp(img[j] + config.pixel_noise * noise[j], 0.0, 1.0));
  }
  return out;
}

}  // namespace pni
