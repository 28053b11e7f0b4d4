#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pni/attacks.hpp"
#include "pni/dataset.hpp"
#include "pni/model.hpp"
#include "pni/rng.hpp"

namespace pni {

struct LrSchedule {
  double initial = 0.05;
  std::vector<std::size_t> decay_epochs;  // epochs (0-based) at whose start the rate is multiplied
  double decay_factor = 0.1;

  double at(std::size_t epoch) const;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 5e-4;  // theta only
  double w_c = 0.5;
  double w_a = 0.5;
  /// Inner maximizer. Skipped entirely when w_a = 0.
  AttackConfig attack;
  std::optional<double> alpha_grad_clip;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Momentum buffers for every named parameter.
struct OptimizerState {
  std::map<std::string, std::vector<double>> velocity;
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// Momentum SGD with weight decay for theta: V = m V + (g + wd theta),
/// theta -= lr V. Coefficients go through alpha_update with no decay.
void sgd_step(Model& model, OptimizerState& state, double lr, double momentum, double weight_decay,
              std::optional<double> alpha_grad_clip = std::nullopt);

/// Everything needed to continue training: parameters, optimizer buffers,
/// completed epochs and the base random stream.
struct TrainState {
  Model model;
  OptimizerState optimizer;
  std::size_t epoch = 0;
  Rng rng;

  static TrainState fresh(Model model, std::uint64_t seed);
};

/// w_c * CE(g(x), t) + w_a * CE(g(x_adv), t). Each term is its own forward
/// pass and so draws its own noise from `noise`. A term with zero weight is
/// not evaluated.
Tensor ensemble_loss(const Model& model, const Tensor& x, const Tensor& x_adv, std::span<const int> labels, double w_c,
                     double w_a, NoiseContext& noise);

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double clean_loss = 0.0;
  double adv_loss = 0.0;
  double clean_accuracy = 0.0;
  double adv_accuracy = 0.0;
  std::vector<double> batch_losses;
  std::vector<std::pair<std::string, double>> alpha;  // per coefficient after the epoch

  nlohmann::ordered_json to_json() const;
};

/// One pass over `data` in a seeded order. Per batch: labels for the inner
/// attack come from a noisy prediction, x_adv from PGD against them, then the
/// ensemble loss on the true labels drives one optimizer step. Throws
/// TrainingError on a non-finite loss.
EpochStats adv_train_epoch(TrainState& state, const Dataset& data, const TrainConfig& config);

/// Runs epochs state.epoch .. config.epochs - 1, calling `on_epoch` after each.
std::vector<EpochStats> train(TrainState& state, const Dataset& data, const TrainConfig& config,
                              const std::function<void(const TrainState&, const EpochStats&)>& on_epoch = {});

}  // namespace pni
