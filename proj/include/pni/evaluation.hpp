#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pni/attacks.hpp"
#include "pni/dataset.hpp"
#include "pni/model.hpp"

namespace pni {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single trial
  std::vector<double> trials;
};

MeanStd summarize(std::vector<double> values);

enum class AttackKind { None, Fgsm, Pgd };

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& text);

struct EvalOptions {
  std::size_t trials = 5;
  /// Keep PNI noise active in the evaluated model. Attack generation follows
  /// the same switch, so turning it off evaluates the deterministic network.
  bool noise_at_test = true;
  std::uint64_t seed = 0;
  /// Samples per attack call. Each chunk gets its own random stream, so
  /// results do not depend on `threads`.
  std::size_t chunk = 100;
  std::size_t threads = 1;
};

/// Accuracy in percent under `attack`, one value per trial. Each trial
/// reseeds noise and attack randomness.
MeanStd eval_accuracy(const Model& model, const Dataset& data, AttackKind attack, const AttackConfig& config,
                      const EvalOptions& options);

/// Accuracy (percent) of `target` on PGD examples crafted against `source`.
MeanStd eval_transfer(const Model& source, const Model& target, const Dataset& data, const AttackConfig& config,
                      const EvalOptions& options);

struct CurvePoint {
  double x = 0.0;
  MeanStd accuracy;
};

struct Curve {
  std::string axis;  // "epsilon" or "n_step"
  std::vector<CurvePoint> points;

  /// axis,mean,std rows with a header line.
  std::string to_csv() const;
};

/// PGD accuracy along `grid`. On the epsilon axis the step size scales with
/// epsilon (step_size / epsilon of `base` is kept); epsilon 0 is clean
/// accuracy. Throws ConfigError unless the grid is strictly increasing.
Curve sweep(const Model& model, const Dataset& data, const std::string& axis, const std::vector<double>& grid,
            const AttackConfig& base, const EvalOptions& options);

struct ChecklistItem {
  int id = 0;
  std::string name;
  bool passed = false;
  nlohmann::ordered_json measured;
};

struct ChecklistReport {
  std::vector<ChecklistItem> items;
  bool all_passed() const;
};

struct ChecklistOptions {
  AttackConfig pgd;  // white-box and transfer attack
  std::vector<double> epsilon_grid;
  /// PGD used for the unbounded item; epsilon is forced to the full input range.
  std::size_t unbounded_steps = 20;
};

/// Five gradient-obfuscation checks on `defended`, with `source` as the
/// transfer-attack model:
///   1 FGSM accuracy >= PGD accuracy
///   2 transfer accuracy >= white-box PGD accuracy
///   3 PGD at epsilon = full range drives accuracy to chance or below
///   4 attack success rate strictly increases along the epsilon grid (or
///     stays at 100% once reached)
///   5 the accuracy curve is non-increasing within 2 std
ChecklistReport obfuscation_checklist(const Model& defended, const Model& source, const Dataset& data,
                                      const ChecklistOptions& checklist, const EvalOptions& options);

struct CwSummary {
  double success_rate = 0.0;  // percent
  double mean_l2 = 0.0;       // over successful samples
  std::size_t samples = 0;
  AdversarialBatch batch;
};

CwSummary eval_cw(const Model& model, const Dataset& data, const CwConfig& config, const EvalOptions& options);

struct ZooSummary {
  double success_rate = 0.0;  // percent
  double mean_queries = 0.0;
  std::size_t samples = 0;
  AdversarialBatch batch;
};

/// Score-only attack against the model's query interface. With
/// options.noise_at_test, each query row is answered with fresh noise.
ZooSummary eval_zoo(const Model& model, const Dataset& data, const ZooConfig& config, const EvalOptions& options);

nlohmann::ordered_json to_json(const MeanStd& v);
nlohmann::ordered_json to_json(const Curve& curve);
nlohmann::ordered_json to_json(const ChecklistReport& report);

}  // namespace pni
