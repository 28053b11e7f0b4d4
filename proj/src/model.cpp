#include "pni/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pni/error.hpp"
#include "pni/ops.hpp"

namespace pni {
namespace {

std::string kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::Flatten: return "flatten";
  }
  return "relu";
}

LayerKind parse_kind(const std::string& s, const std::string& field) {
  if (s == "dense") return LayerKind::Dense;
  if (s == "conv") return LayerKind::Conv2d;
  if (s == "relu") return LayerKind::Relu;
  if (s == "flatten") return LayerKind::Flatten;
  throw ConfigError("unknown layer type '" + s + "'", field);
}

// Per-sample output shape of layer i, throwing on inconsistencies.
Shape infer(const LayerSpec& layer, const Shape& in, std::size_t index) {
  const std::string field = "layers[" + std::to_string(index) + "]";
  switch (layer.kind) {
    case LayerKind::Dense:
      if (in.size() != 1) throw ConfigError("dense layer needs a flat input, got " + to_string(in), field);
      if (layer.in_features != in[0] || layer.out_features == 0) {
        throw ConfigError("dense in_features " + std::to_string(layer.in_features) + " does not match input " +
                              to_string(in),
                          field);
      }
      return {layer.out_features};
    case LayerKind::Conv2d: {
      if (in.size() != 3) throw ConfigError("conv layer needs [C,H,W] input, got " + to_string(in), field);
      if (layer.in_channels != in[0] || layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0) {
        throw ConfigError("conv channels/kernel do not match input " + to_string(in), field);
      }
      if (layer.kernel > in[1] + 2 * layer.padding || layer.kernel > in[2] + 2 * layer.padding) {
        throw ConfigError("conv kernel larger than padded input " + to_string(in), field);
      }
      return {layer.out_channels, (in[1] + 2 * layer.padding - layer.kernel) / layer.stride + 1,
              (in[2] + 2 * layer.padding - layer.kernel) / layer.stride + 1};
    }
    case LayerKind::Relu: return in;
    case LayerKind::Flatten: return {numel(in)};
  }
  return in;
}

}  // namespace

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out, Placement p) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.in_features = in;
  l.out_features = out;
  l.placement = p;
  return l;
}

LayerSpec LayerSpec::conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                          std::size_t padding, Placement p) {
  LayerSpec l;
  l.kind = LayerKind::Conv2d;
  l.in_channels = in_ch;
  l.out_channels = out_ch;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  l.placement = p;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::Flatten;
  return l;
}

void ModelSpec::validate() const {
  if (input_shape.empty()) throw ConfigError("input shape is empty", "input_shape");
  if (classes < 2) throw ConfigError("need at least two classes", "classes");
  if (layers.empty()) throw ConfigError("model has no layers", "layers");
  Shape shape = input_shape;
  bool first = true;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    if (!layer.parametric() && layer.placement != Placement::None) {
      throw ConfigError("noise placement on a non-parametric layer", "layers[" + std::to_string(i) + "]");
    }
    if (layer.parametric()) {
      try {
        validate_placement(layer.placement, first);
      } catch (const ConfigError& e) {
        throw ConfigError(e.what(), "layers[" + std::to_string(i) + "].placement");
      }
      first = false;
    }
    shape = infer(layer, shape, i);
  }
  if (shape.size() != 1 || shape[0] != classes) {
    throw ConfigError("network output " + to_string(shape) + " does not match " + std::to_string(classes) +
                          " classes",
                      "layers");
  }
}

bool ModelSpec::has_noise() const {
  return std::any_of(layers.begin(), layers.end(), [](const LayerSpec& l) { return l.placement != Placement::None; });
}

ModelSpec ModelSpec::with_placement(Placement placement) const {
  ModelSpec out = *this;
  bool first = true;
  for (auto& layer : out.layers) {
    if (!layer.parametric()) continue;
    layer.placement = (placement == Placement::I && !first) ? Placement::None : placement;
    first = false;
  }
  return out;
}

ModelSpec ModelSpec::desk_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t classes,
                              Placement placement, std::size_t multiplier) {
  if (multiplier == 0) throw ConfigError("must be >= 1", "width");
  const std::size_t k = multiplier;
  ModelSpec spec;
  spec.input_shape = {channels, height, width};
  spec.classes = classes;
  const std::size_t h1 = (height + 2 - 3) / 2 + 1, w1 = (width + 2 - 3) / 2 + 1;
  const std::size_t h2 = (h1 + 2 - 3) / 2 + 1, w2 = (w1 + 2 - 3) / 2 + 1;
  spec.layers = {LayerSpec::conv(channels, 8 * k, 3, 2, 1),
                 LayerSpec::relu(),
                 LayerSpec::conv(8 * k, 16 * k, 3, 2, 1),
                 LayerSpec::relu(),
                 LayerSpec::flatten(),
                 LayerSpec::dense(16 * k * h2 * w2, 64 * k),
                 LayerSpec::relu(),
                 LayerSpec::dense(64 * k, classes)};
  return spec.with_placement(placement);
}

ModelSpec ModelSpec::mlp(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t classes,
                         Placement placement) {
  ModelSpec spec;
  spec.input_shape = {inputs};
  spec.classes = classes;
  std::size_t prev = inputs;
  for (std::size_t h : hidden) {
    spec.layers.push_back(LayerSpec::dense(prev, h));
    spec.layers.push_back(LayerSpec::relu());
    prev = h;
  }
  spec.layers.push_back(LayerSpec::dense(prev, classes));
  return spec.with_placement(placement);
}

nlohmann::json to_json(const ModelSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json j{{"type", kind_name(l.kind)}};
    if (l.kind == LayerKind::Dense) {
      j["in"] = l.in_features;
      j["out"] = l.out_features;
    } else if (l.kind == LayerKind::Conv2d) {
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
    }
    if (l.parametric()) j["placement"] = std::string(to_string(l.placement));
    layers.push_back(std::move(j));
  }
  return {{"input_shape", spec.input_shape}, {"classes", spec.classes}, {"layers", std::move(layers)}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  try {
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.classes = j.at("classes").get<std::size_t>();
    const auto& layers = j.at("layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& lj = layers[i];
      const std::string field = "layers[" + std::to_string(i) + "]";
      LayerSpec l;
      l.kind = parse_kind(lj.at("type").get<std::string>(), field + ".type");
      if (l.kind == LayerKind::Dense) {
        l.in_features = lj.at("in").get<std::size_t>();
        l.out_features = lj.at("out").get<std::size_t>();
      } else if (l.kind == LayerKind::Conv2d) {
        l.in_channels = lj.at("in_channels").get<std::size_t>();
        l.out_channels = lj.at("out_channels").get<std::size_t>();
        l.kernel = lj.at("kernel").get<std::size_t>();
        l.stride = lj.value("stride", std::size_t{1});
        l.padding = lj.value("padding", std::size_t{0});
      }
      if (lj.contains("placement")) l.placement = parse_placement(lj.at("placement").get<std::string>());
      spec.layers.push_back(l);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model spec: ") + e.what(), "model");
  }
  spec.validate();
  return spec;
}

std::string layer_name(const ModelSpec& spec, std::size_t index) {
  std::size_t convs = 0, denses = 0;
  for (std::size_t i = 0; i < index; ++i) {
    if (spec.layers[i].kind == LayerKind::Conv2d) ++convs;
    if (spec.layers[i].kind == LayerKind::Dense) ++denses;
  }
  return spec.layers[index].kind == LayerKind::Conv2d ? "conv" + std::to_string(convs) : "fc" + std::to_string(denses);
}

Model Model::create(const ModelSpec& spec, std::uint64_t seed, double alpha_init) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  Rng rng(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (!l.parametric()) continue;
    const std::string name = layer_name(spec, i);
    Shape wshape, bshape;
    std::size_t fan_in = 0;
    if (l.kind == LayerKind::Dense) {
      wshape = {l.in_features, l.out_features};
      bshape = {l.out_features};
      fan_in = l.in_features;
    } else {
      wshape = {l.out_channels, l.in_channels, l.kernel, l.kernel};
      bshape = {l.out_channels};
      fan_in = l.in_channels * l.kernel * l.kernel;
    }
    auto w = rng.normals(numel(wshape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w) v *= std;
    m.params_.push_back({name + ".weight", Tensor(wshape, std::move(w), true)});
    m.params_.push_back({name + ".bias", Tensor::zeros(bshape, true)});
    if (injects_weight(l.placement)) m.coefficients_.push_back(PniCoefficient::make(name + ".w", alpha_init));
    if (injects_input(l.placement) || injects_output(l.placement)) {
      m.coefficients_.push_back(PniCoefficient::make(name + ".a", alpha_init));
    }
  }
  return m;
}

const Tensor& Model::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw ConfigError("no parameter named '" + name + "'", name);
}

const PniCoefficient* Model::coefficient(const std::string& layer_id) const {
  for (const auto& c : coefficients_)
    if (c.layer_id == layer_id) return &c;
  return nullptr;
}

Tensor Model::forward(const Tensor& x, NoiseContext& noise, const ForwardOptions& options) const {
  if (x.dim() != spec_.input_shape.size() + 1 ||
      !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), x.shape().begin() + 1)) {
    throw DimensionError("model expects [N x " + to_string(spec_.input_shape) + "] input, got " + to_string(x.shape()));
  }
  auto param = [&](const std::string& name) {
    const Tensor& p = parameter(name);
    return options.parameter_grads ? p : p.detach();
  };
  auto coeff = [&](const std::string& id) -> std::optional<PniCoefficient> {
    const PniCoefficient* c = coefficient(id);
    if (!c) return std::nullopt;
    if (options.parameter_grads) return *c;
    return PniCoefficient{c->layer_id, c->alpha.detach(), c->velocity};
  };

  Tensor h = x;
  bool first = true;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    switch (l.kind) {
      case LayerKind::Relu:
        if (options.min_relu_margin) {
          for (double v : h.data()) *options.min_relu_margin = std::min(*options.min_relu_margin, std::abs(v));
        }
        h = relu(h);
        break;
      case LayerKind::Flatten: h = flatten(h); break;
      case LayerKind::Dense:
      case LayerKind::Conv2d: {
        const std::string name = layer_name(spec_, i);
        LinearView view{name, param(name + ".weight"), param(name + ".bias"), {}};
        if (l.kind == LayerKind::Dense) {
          view.linear = [](const Tensor& in, const Tensor& w) { return matmul(in, w); };
        } else {
          const Conv2dParams cp{l.stride, l.padding};
          view.linear = [cp](const Tensor& in, const Tensor& w) { return conv2d(in, w, cp); };
        }
        const auto wc = coeff(name + ".w");
        const auto ac = coeff(name + ".a");
        LayerCoefficients lc{wc ? &*wc : nullptr, ac ? &*ac : nullptr};
        h = apply_placement(view, h, l.placement, first, lc, noise);
        first = false;
        break;
      }
    }
  }
  return h;
}

void Model::zero_grad() const {
  for (const auto& p : params_) p.value.zero_grad();
  for (const auto& c : coefficients_) c.alpha.zero_grad();
}

Model Model::clone() const {
  Model m;
  m.spec_ = spec_;
  for (const auto& p : params_) m.params_.push_back({p.name, p.value.detach(true)});
  for (const auto& c : coefficients_) m.coefficients_.push_back({c.layer_id, c.alpha.detach(true), c.velocity});
  return m;
}

}  // namespace pni
