#include "pni/noise.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "pni/error.hpp"
#include "pni/ops.hpp"

namespace pni {

std::string_view to_string(Placement placement) {
  switch (placement) {
    case Placement::None: return "none";
    case Placement::W: return "W";
    case Placement::I: return "I";
    case Placement::A_a: return "A-a";
    case Placement::A_b: return "A-b";
    case Placement::W_plus_A_a: return "W+A-a";
    case Placement::W_plus_A_b: return "W+A-b";
  }
  return "none";
}

Placement parse_placement(std::string_view text) {
  std::string norm;
  for (char ch : text) {
    if (ch == '_') ch = '-';
    norm.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  if (norm.rfind("pni-", 0) == 0) norm.erase(0, 4);
  if (norm == "none" || norm.empty()) return Placement::None;
  if (norm == "w") return Placement::W;
  if (norm == "i") return Placement::I;
  if (norm == "a-a") return Placement::A_a;
  if (norm == "a-b") return Placement::A_b;
  if (norm == "w+a-a" || norm == "w-plus-a-a") return Placement::W_plus_A_a;
  if (norm == "w+a-b" || norm == "w-plus-a-b") return Placement::W_plus_A_b;
  throw ConfigError("unknown PNI placement '" + std::string(text) + "'", "placement");
}

bool injects_weight(Placement p) {
  return p == Placement::W || p == Placement::W_plus_A_a || p == Placement::W_plus_A_b;
}
bool injects_input(Placement p) {
  return p == Placement::I || p == Placement::A_b || p == Placement::W_plus_A_b;
}
bool injects_output(Placement p) { return p == Placement::A_a || p == Placement::W_plus_A_a; }

void validate_placement(Placement placement, bool first_parametric_layer) {
  if (placement == Placement::I && !first_parametric_layer) {
    throw ConfigError("placement I applies only to the network input (first parametric layer)", "placement");
  }
}

PniCoefficient PniCoefficient::make(std::string layer_id, double init) {
  return PniCoefficient{std::move(layer_id), Tensor::scalar(init, true), 0.0};
}

void PniCoefficient::set_value(double v) { alpha.mutable_data()[0] = v; }

double tensor_std(std::span<const double> values) {
  if (values.empty()) throw ContractError("tensor_std of an empty tensor");
  const double n = static_cast<double>(values.size());
  double mu = 0.0;
  for (double v : values) mu += v;
  mu /= n;
  double acc = 0.0;
  for (double v : values) acc += (v - mu) * (v - mu);
  return std::sqrt(acc / n);
}

PniGradient pni_backward(std::span<const double> upstream, std::span<const double> eta) {
  if (upstream.size() != eta.size()) {
    throw DimensionError("pni_backward: upstream has " + std::to_string(upstream.size()) + " elements, eta has " +
                         std::to_string(eta.size()));
  }
  PniGradient g;
  g.grad_v.assign(upstream.begin(), upstream.end());
  for (std::size_t i = 0; i < eta.size(); ++i) g.grad_alpha += upstream[i] * eta[i];
  return g;
}

Tensor inject_noise(const Tensor& v, const Tensor& alpha, const Tensor& eta) {
  if (alpha.numel() != 1) throw DimensionError("inject_noise: alpha must hold one element");
  if (eta.shape() != v.shape()) {
    throw DimensionError("inject_noise: eta " + to_string(eta.shape()) + " vs tensor " + to_string(v.shape()));
  }
  const double a = alpha.item();
  std::vector<double> out(v.numel());
  auto x = v.data(), e = eta.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + a * e[i];
  return Tensor::from_op("pni", v.shape(), std::move(out), {v, alpha, eta}, [](detail::Node& self) {
    const PniGradient g = pni_backward(self.grad, self.parents[2].data());
    if (self.parents[0].requires_grad()) {
      auto buf = self.parents[0].grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g.grad_v[i];
    }
    if (self.parents[1].requires_grad()) self.parents[1].grad_buffer()[0] += g.grad_alpha;
  });
}

NoisyTensor pni_forward_from_draws(const Tensor& v, const Tensor& alpha, std::span<const double> unit_draws) {
  if (unit_draws.size() != v.numel()) throw DimensionError("pni_forward: draw count does not match tensor");
  const double sigma = tensor_std(v);
  std::vector<double> eta(unit_draws.begin(), unit_draws.end());
  for (auto& e : eta) e *= sigma;
  Tensor eta_t(v.shape(), std::move(eta));
  return {inject_noise(v, alpha, eta_t), eta_t};
}

NoisyTensor pni_forward(const Tensor& v, const PniCoefficient& coeff, Rng& rng, bool enabled) {
  if (!enabled) return {v, Tensor::zeros(v.shape())};
  const auto draws = rng.normals(v.numel());
  return pni_forward_from_draws(v, coeff.alpha, draws);
}

void alpha_update(PniCoefficient& coeff, double grad, double momentum, double lr, std::optional<double> grad_clip) {
  if (grad_clip) grad = std::clamp(grad, -*grad_clip, *grad_clip);
  coeff.velocity = momentum * coeff.velocity + grad;
  coeff.set_value(coeff.value() - lr * coeff.velocity);
}

NoiseContext NoiseContext::replaying() const {
  if (mode_ != Mode::Record && mode_ != Mode::Replay) {
    throw ContractError("replaying() requires a recording noise context");
  }
  NoiseContext out(Mode::Replay, rng_);
  out.recorded_ = recorded_;
  return out;
}

void NoiseContext::rewind() { cursor_.clear(); }

Tensor NoiseContext::apply(const Tensor& v, const PniCoefficient& coeff, const std::string& site) {
  switch (mode_) {
    case Mode::Off: return v;
    case Mode::Sample: return pni_forward(v, coeff, rng_, true).value;
    case Mode::Record: {
      NoisyTensor out = pni_forward(v, coeff, rng_, true);
      recorded_[site].emplace_back(out.eta.data().begin(), out.eta.data().end());
      return out.value;
    }
    case Mode::Replay: {
      auto it = recorded_.find(site);
      std::size_t& cur = cursor_[site];
      if (it == recorded_.end() || cur >= it->second.size()) {
        throw ContractError("no recorded noise left for site '" + site + "'");
      }
      return inject_noise(v, coeff.alpha, Tensor(v.shape(), it->second[cur++]));
    }
  }
  return v;
}

Tensor apply_placement(const LinearView& layer, const Tensor& input, Placement placement, bool first_layer,
                       const LayerCoefficients& coeffs, NoiseContext& ctx) {
  validate_placement(placement, first_layer);
  auto need = [&](const PniCoefficient* c, const char* what) -> const PniCoefficient& {
    if (!c) throw ConfigError("layer '" + layer.name + "' is missing its " + what + " coefficient", "placement");
    return *c;
  };
  Tensor x = input;
  if (injects_input(placement) && ctx.enabled()) x = ctx.apply(x, need(coeffs.activation, "input"), layer.name + ".a");
  Tensor w = layer.weight;
  if (injects_weight(placement) && ctx.enabled()) w = ctx.apply(w, need(coeffs.weight, "weight"), layer.name + ".w");
  Tensor y = layer.linear(x, w);
  if (layer.bias.defined()) y = add_bias(y, layer.bias);
  if (injects_output(placement) && ctx.enabled()) y = ctx.apply(y, need(coeffs.activation, "output"), layer.name + ".a");
  return y;
}

}  // namespace pni
