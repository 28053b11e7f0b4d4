#pragma once

#include <cstddef>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "pni/model.hpp"
#include "pni/rng.hpp"
#include "pni/tensor.hpp"

namespace pni {

/// L-infinity attack settings shared by FGSM and PGD.
struct AttackConfig {
  double epsilon = 0.15;
  double step_size = 0.01;
  std::size_t n_step = 7;
  /// Sample fresh PNI noise in every forward/backward of the attack (and of
  /// the final success check). Ignored for models without noise.
  bool with_pni_in_generation = true;
  bool random_start = false;
  double clip_lo = 0.0;
  double clip_hi = 1.0;

  void validate() const;
};

struct CwConfig {
  double initial_c = 0.01;
  double confidence_k = 0.0;
  std::size_t binary_search_steps = 9;
  std::size_t inner_iterations = 10;
  double learning_rate = 5e-4;
  bool with_pni_in_generation = true;

  void validate() const;
};

struct ZooConfig {
  std::size_t iterations = 100;
  std::size_t coordinate_batch = 64;
  double h = 1e-4;
  double learning_rate = 0.01;
  /// Weight of the margin term against the squared distortion.
  double c = 10.0;
  double confidence_k = 0.0;
  double clip_lo = 0.0;
  double clip_hi = 1.0;

  void validate() const;
};

struct AdversarialBatch {
  Tensor x;      // clean inputs
  Tensor x_adv;  // perturbed inputs, same shape
  std::vector<int> labels;  // labels the attack was run against
  std::vector<bool> success;
  std::vector<double> l2;
  std::vector<double> linf;
  std::vector<std::size_t> queries;  // score queries per sample (ZOO only)

  std::size_t size() const { return labels.size(); }
  double success_rate() const;
  /// Fraction of samples the target still classifies as `labels`.
  double accuracy() const { return 1.0 - success_rate(); }
};

/// Arg-max labels from one forward pass; ties go to the lowest class. With
/// `noisy`, a PNI model samples its noise from `rng`.
std::vector<int> predict_label(const Model& model, const Tensor& x, bool noisy, Rng& rng);
std::vector<int> predict_label(const Model& model, const Tensor& x);

/// sgn with sgn(0) = 0.
double sign(double v);

/// Gradient of the batch cross-entropy w.r.t. the input. Throws AttackError
/// naming the first sample with a non-finite gradient.
std::vector<double> input_gradient(const Model& model, const Tensor& x, std::span<const int> labels,
                                   NoiseContext& noise);

AdversarialBatch fgsm(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& config,
                      Rng& rng);
AdversarialBatch pgd(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& config,
                     Rng& rng);

/// Per-row max(Z_t - max_{i != t} Z_i, -k) of logits [N x K], returned as [N].
Tensor margin_loss(const Tensor& logits, std::span<const int> labels, double k);

/// Untargeted Carlini-Wagner L2 with tanh box reparameterization and Adam.
AdversarialBatch cw_l2(const Model& model, const Tensor& x, std::span<const int> labels, const CwConfig& config,
                       Rng& rng);

/// Scores [B x K] for a batch of inputs [B x ...]. Rows are independent
/// queries.
using QueryFn = std::function<Tensor(const Tensor& batch)>;
/// Objective value per row of a batch [B x ...].
using BatchObjective = std::function<std::vector<double>(const Tensor& batch)>;

/// Symmetric-difference estimates (f(x + h e_i) - f(x - h e_i)) / 2h of the
/// listed coordinates of a single input x [1 x ...], from one batched call.
std::vector<double> zoo_coordinate_gradient(const BatchObjective& objective, const Tensor& x,
                                            std::span<const std::size_t> coords, double h);

/// Score-only coordinate attack (ZOO-Adam) on each sample independently.
/// Stops per sample on success or when the iteration budget is spent.
AdversarialBatch zoo_attack(const QueryFn& query, const Tensor& x, std::span<const int> labels,
                            const ZooConfig& config, Rng& rng);

/// Query function backed by a model. With `noisy`, every row is a separate
/// forward pass with its own noise sample.
QueryFn model_query(const Model& model, bool noisy, Rng& rng);

/// PGD examples crafted on `source`, scored on `target`. Returns the target's
/// accuracy on them. Throws ConfigError if the models disagree on input
/// shape or class count.
double transfer_attack(const Model& source, const Model& target, const Tensor& x, std::span<const int> labels,
                       const AttackConfig& config, bool target_noisy, Rng& rng);

/// One JSON object per line: index, success, linf, l2, queries.
void write_attack_records(std::ostream& out, const AdversarialBatch& batch, std::size_t first_index = 0);

}  // namespace pni
