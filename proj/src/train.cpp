#include "pni/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "pni/error.hpp"
#include "pni/ops.hpp"

namespace pni {
namespace {

struct EnsembleTerms {
  Tensor total;
  Tensor clean_logits, adv_logits;
  double clean = 0.0, adv = 0.0;
};

EnsembleTerms ensemble_terms(const Model& model, const Tensor& x, const Tensor& x_adv, std::span<const int> labels,
                             double w_c, double w_a, NoiseContext& noise) {
  if (x.shape() != x_adv.shape()) {
    throw DimensionError("clean batch " + to_string(x.shape()) + " and adversarial batch " + to_string(x_adv.shape()) +
                         " differ in shape");
  }
  EnsembleTerms out;
  if (w_c != 0.0) {
    out.clean_logits = model.forward(x, noise);
    const Tensor l = softmax_cross_entropy(out.clean_logits, labels);
    out.clean = l.item();
    out.total = scale(l, w_c);
  }
  if (w_a != 0.0) {
    out.adv_logits = model.forward(x_adv, noise);
    const Tensor l = softmax_cross_entropy(out.adv_logits, labels);
    out.adv = l.item();
    out.total = out.total.defined() ? add(out.total, scale(l, w_a)) : scale(l, w_a);
  }
  if (!out.total.defined()) out.total = Tensor::scalar(0.0);
  return out;
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  if (!logits.defined()) return 0;
  const auto pred = argmax_rows(logits);
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) n += pred[i] == labels[i];
  return n;
}

std::string alpha_summary(const Model& model) {
  std::ostringstream s;
  for (const auto& c : model.coefficients()) s << ' ' << c.layer_id << '=' << c.value();
  return s.str();
}

}  // namespace

double LrSchedule::at(std::size_t epoch) const {
  double lr = initial;
  for (std::size_t e : decay_epochs) {
    if (epoch >= e) lr *= decay_factor;
  }
  return lr;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("must be > 0", "train.batch_size");
  if (!(lr.initial > 0.0)) throw ConfigError("must be > 0", "train.lr");
  if (!(lr.decay_factor > 0.0)) throw ConfigError("must be > 0", "train.lr_decay_factor");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("must lie in [0, 1)", "train.momentum");
  if (!(weight_decay >= 0.0)) throw ConfigError("must be >= 0", "train.weight_decay");
  if (!(w_c >= 0.0) || !(w_a >= 0.0) || !(w_c + w_a > 0.0)) {
    throw ConfigError("loss weights must be non-negative with a positive sum", "train.w_c");
  }
  if (alpha_grad_clip && !(*alpha_grad_clip > 0.0)) throw ConfigError("must be > 0", "train.alpha_grad_clip");
  if (w_a > 0.0) attack.validate();
}

void sgd_step(Model& model, OptimizerState& state, double lr, double momentum, double weight_decay,
              std::optional<double> alpha_grad_clip) {
  for (auto& p : model.parameters()) {
    auto& v = state.velocity[p.name];
    v.resize(p.value.numel(), 0.0);
    auto theta = p.value.mutable_data();
    const bool has = p.value.has_grad();
    const auto g = has ? p.value.grad() : std::span<const double>{};
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = momentum * v[i] + (has ? g[i] : 0.0) + weight_decay * theta[i];
      theta[i] -= lr * v[i];
    }
  }
  for (auto& c : model.coefficients()) {
    const double g = c.alpha.has_grad() ? c.alpha.grad()[0] : 0.0;
    alpha_update(c, g, momentum, lr, alpha_grad_clip);
  }
}

TrainState TrainState::fresh(Model model, std::uint64_t seed) { return {std::move(model), {}, 0, Rng(seed)}; }

Tensor ensemble_loss(const Model& model, const Tensor& x, const Tensor& x_adv, std::span<const int> labels, double w_c,
                     double w_a, NoiseContext& noise) {
  return ensemble_terms(model, x, x_adv, labels, w_c, w_a, noise).total;
}

nlohmann::ordered_json EpochStats::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["loss"] = loss;
  j["clean_loss"] = clean_loss;
  j["adv_loss"] = adv_loss;
  j["clean_accuracy"] = clean_accuracy;
  j["adv_accuracy"] = adv_accuracy;
  j["batch_losses"] = batch_losses;
  nlohmann::ordered_json a = nlohmann::ordered_json::object();
  for (const auto& [id, v] : alpha) a[id] = v;
  j["alpha"] = a;
  return j;
}

EpochStats adv_train_epoch(TrainState& state, const Dataset& data, const TrainConfig& config) {
  config.validate();
  Model& model = state.model;
  if (data.sample_shape != model.spec().input_shape) {
    throw ConfigError("dataset samples " + to_string(data.sample_shape) + " do not match model input " +
                          to_string(model.spec().input_shape),
                      "model");
  }
  const bool adversarial = config.w_a > 0.0;
  const Rng epoch_rng = state.rng.derive(state.epoch);
  Rng order_rng = epoch_rng.derive(0);
  Rng attack_rng = epoch_rng.derive(2);
  NoiseContext noise = model.has_noise() ? NoiseContext::sampling(epoch_rng.derive(1)) : NoiseContext::off();

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order);

  EpochStats stats;
  stats.epoch = state.epoch;
  stats.lr = config.lr.at(state.epoch);
  double clean_sum = 0.0, adv_sum = 0.0, loss_sum = 0.0;
  std::size_t clean_correct = 0, adv_correct = 0, seen = 0;

  for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
    const std::size_t count = std::min(config.batch_size, order.size() - begin);
    const std::span<const std::size_t> idx(order.data() + begin, count);
    const Tensor x = data.batch(idx);
    const std::vector<int> t = data.batch_labels(idx);

    Tensor x_adv = x;
    if (adversarial) {
      const std::vector<int> t_gen = predict_label(model, x, true, attack_rng);
      x_adv = pgd(model, x, t_gen, config.attack, attack_rng).x_adv;
    }

    model.zero_grad();
    const EnsembleTerms terms = ensemble_terms(model, x, x_adv, t, config.w_c, config.w_a, noise);
    const double loss = terms.total.item();
    if (!std::isfinite(loss)) {
      throw TrainingError("non-finite loss at epoch " + std::to_string(state.epoch) + ", batch " +
                          std::to_string(begin / config.batch_size) + "; alpha:" + alpha_summary(model));
    }
    backward(terms.total);
    sgd_step(model, state.optimizer, stats.lr, config.momentum, config.weight_decay, config.alpha_grad_clip);

    stats.batch_losses.push_back(loss);
    loss_sum += loss * static_cast<double>(count);
    clean_sum += terms.clean * static_cast<double>(count);
    adv_sum += terms.adv * static_cast<double>(count);
    clean_correct += count_correct(terms.clean_logits, t);
    adv_correct += count_correct(terms.adv_logits, t);
    seen += count;
  }

  const double n = static_cast<double>(std::max<std::size_t>(seen, 1));
  stats.loss = loss_sum / n;
  stats.clean_loss = clean_sum / n;
  stats.adv_loss = adv_sum / n;
  stats.clean_accuracy = static_cast<double>(clean_correct) / n;
  stats.adv_accuracy = static_cast<double>(adv_correct) / n;
  for (const auto& c : model.coefficients()) stats.alpha.emplace_back(c.layer_id, c.value());
  ++state.epoch;
  return stats;
}

std::vector<EpochStats> train(TrainState& state, const Dataset& data, const TrainConfig& config,
                              const std::function<void(const TrainState&, const EpochStats&)>& on_epoch) {
  config.validate();
  std::vector<EpochStats> out;
  while (state.epoch < config.epochs) {
    out.push_back(adv_train_epoch(state, data, config));
    if (on_epoch) on_epoch(state, out.back());
  }
  return out;
}

}  // namespace pni
