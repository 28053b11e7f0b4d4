#pragma once

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "pni/noise.hpp"
#include "pni/tensor.hpp"

namespace pni {

enum class LayerKind { Dense, Conv2d, Relu, Flatten };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  // dense
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  // conv2d
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Placement placement = Placement::None;

  static LayerSpec dense(std::size_t in, std::size_t out, Placement p = Placement::None);
  static LayerSpec conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                        std::size_t padding, Placement p = Placement::None);
  static LayerSpec relu();
  static LayerSpec flatten();

  bool parametric() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Layer sequence plus input contract. Input shape is per sample, [C, H, W]
/// or [features].
struct ModelSpec {
  Shape input_shape;
  std::size_t classes = 0;
  std::vector<LayerSpec> layers;

  /// Checks shape flow, class count and placement positions; throws
  /// ConfigError naming the first offending layer.
  void validate() const;
  bool has_noise() const;
  /// Same architecture with `placement` on every parametric layer (I and
  /// A-b are clamped to legal positions: I only on the first layer).
  ModelSpec with_placement(Placement placement) const;

  /// conv(8k, 3x3, s2) - relu - conv(16k, 3x3, s2) - relu - dense(64k) - relu
  /// - dense(classes), with k = `multiplier`.
  static ModelSpec desk_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes,
                            Placement placement = Placement::None, std::size_t multiplier = 1);
  static ModelSpec mlp(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t classes,
                       Placement placement = Placement::None);

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct ForwardOptions {
  /// When false, parameters enter the graph as constants; only input
  /// gradients are computed (attacks).
  bool parameter_grads = true;
  /// Smallest |pre-activation| seen by any ReLU, updated when non-null.
  double* min_relu_margin = nullptr;
};

/// Realized parameters of a ModelSpec: weights/biases (theta) and one
/// PniCoefficient per noise site.
class Model {
 public:
  /// He-normal weights and zero biases drawn from `seed`; every coefficient
  /// starts at `alpha_init`.
  static Model create(const ModelSpec& spec, std::uint64_t seed, double alpha_init = PniCoefficient::kDefaultAlpha);

  const ModelSpec& spec() const noexcept { return spec_; }
  bool has_noise() const { return !coefficients_.empty(); }

  std::vector<NamedTensor>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
  std::vector<PniCoefficient>& coefficients() noexcept { return coefficients_; }
  const std::vector<PniCoefficient>& coefficients() const noexcept { return coefficients_; }

  const Tensor& parameter(const std::string& name) const;
  const PniCoefficient* coefficient(const std::string& layer_id) const;

  /// Logits [N x classes] for a batch [N x input_shape...].
  Tensor forward(const Tensor& x, NoiseContext& noise, const ForwardOptions& options = {}) const;

  void zero_grad() const;
  /// Independent copy of all parameter values and optimizer velocities.
  Model clone() const;

 private:
  ModelSpec spec_;
  std::vector<NamedTensor> params_;
  std::vector<PniCoefficient> coefficients_;
};

/// Name prefix of parametric layer i, e.g. "conv0", "fc3".
std::string layer_name(const ModelSpec& spec, std::size_t index);

}  // namespace pni
