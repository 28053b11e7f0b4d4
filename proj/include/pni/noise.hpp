#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pni/rng.hpp"
#include "pni/tensor.hpp"

namespace pni {

/// Where trainable noise is injected in a convolution / fully-connected layer.
///   W    - on the weight tensor before the linear op
///   I    - on the network input (first layer only)
///   A_a  - on the layer output (after bias)
///   A_b  - on the layer input
enum class Placement { None, W, I, A_a, A_b, W_plus_A_a, W_plus_A_b };

std::string_view to_string(Placement placement);
/// Accepts "none", "W", "I", "A-a", "A-b", "W+A-a", "W+A-b" (case-insensitive,
/// '_' and '-' interchangeable). Throws ConfigError otherwise.
Placement parse_placement(std::string_view text);

bool injects_weight(Placement p);
bool injects_input(Placement p);
bool injects_output(Placement p);

/// Throws ConfigError when `placement` cannot be used at this position.
void validate_placement(Placement placement, bool first_parametric_layer);

/// Layer-wise noise scaling coefficient with its momentum velocity.
struct PniCoefficient {
  static constexpr double kDefaultAlpha = 0.25;

  std::string layer_id;
  Tensor alpha;  // [1], requires_grad
  double velocity = 0.0;

  static PniCoefficient make(std::string layer_id, double init = kDefaultAlpha);
  double value() const { return alpha.item(); }
  void set_value(double v);
};

/// Population standard deviation sqrt(mean((v - mean(v))^2)). Zero for one element.
double tensor_std(std::span<const double> values);
inline double tensor_std(const Tensor& v) { return tensor_std(v.data()); }

struct NoisyTensor {
  Tensor value;  // v + alpha * eta
  Tensor eta;    // realized noise sample, sigma(v) folded in, no history
};

/// v + alpha * eta as a graph node. eta is a constant: d/dv = identity and
/// d/dalpha = sum_i upstream_i * eta_i.
Tensor inject_noise(const Tensor& v, const Tensor& alpha, const Tensor& eta);

/// eta = sigma(v) * unit_draws, then inject_noise. sigma is detached.
NoisyTensor pni_forward_from_draws(const Tensor& v, const Tensor& alpha, std::span<const double> unit_draws);

/// Samples fresh eta ~ N(0, sigma(v)^2) when enabled; otherwise returns v
/// unchanged with eta = 0.
NoisyTensor pni_forward(const Tensor& v, const PniCoefficient& coeff, Rng& rng, bool enabled);

struct PniGradient {
  std::vector<double> grad_v;
  double grad_alpha = 0.0;
};

PniGradient pni_backward(std::span<const double> upstream, std::span<const double> eta);

/// Momentum update: V = m * V + grad; alpha -= lr * V. No weight decay.
/// With `grad_clip`, the gradient is clamped to [-clip, clip] first.
void alpha_update(PniCoefficient& coeff, double grad, double momentum, double lr,
                  std::optional<double> grad_clip = std::nullopt);

/// Source of realized noise for a forward pass.
///
/// Off never injects. Sample draws fresh eta from its stream on every call.
/// Record samples like Sample and keeps each realized eta per site; a
/// replaying() copy then returns the same etas in the same order, which
/// freezes the noise for finite-difference checks.
class NoiseContext {
 public:
  enum class Mode { Off, Sample, Record, Replay };

  static NoiseContext off() { return NoiseContext(Mode::Off, Rng(0)); }
  static NoiseContext sampling(Rng rng) { return NoiseContext(Mode::Sample, rng); }
  static NoiseContext recording(Rng rng) { return NoiseContext(Mode::Record, rng); }
  NoiseContext replaying() const;

  Mode mode() const noexcept { return mode_; }
  bool enabled() const noexcept { return mode_ != Mode::Off; }
  Rng& rng() noexcept { return rng_; }

  /// Injects noise scaled by `coeff` into v at `site`.
  Tensor apply(const Tensor& v, const PniCoefficient& coeff, const std::string& site);

  /// Restarts replay from the first recorded sample of every site.
  void rewind();
  const std::map<std::string, std::vector<std::vector<double>>>& recorded() const { return recorded_; }

 private:
  NoiseContext(Mode mode, Rng rng) : mode_(mode), rng_(rng) {}

  Mode mode_;
  Rng rng_;
  std::map<std::string, std::vector<std::vector<double>>> recorded_;
  std::map<std::string, std::size_t> cursor_;
};

/// A convolution or dense layer seen through its parameters and its linear
/// map (without bias).
struct LinearView {
  std::string name;
  Tensor weight;
  Tensor bias;  // may be undefined
  std::function<Tensor(const Tensor& input, const Tensor& weight)> linear;
};

/// Coefficients used by one layer: `weight` for W, `activation` for I, A-a
/// and A-b. Hybrids use both.
struct LayerCoefficients {
  const PniCoefficient* weight = nullptr;
  const PniCoefficient* activation = nullptr;
};

/// Runs the layer with noise injected according to `placement`. Noise is
/// drawn in the order input, weight, output.
Tensor apply_placement(const LinearView& layer, const Tensor& input, Placement placement, bool first_layer,
                       const LayerCoefficients& coeffs, NoiseContext& ctx);

}  // namespace pni
