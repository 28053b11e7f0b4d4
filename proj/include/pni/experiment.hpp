#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pni/attacks.hpp"
#include "pni/dataset.hpp"
#include "pni/evaluation.hpp"
#include "pni/model.hpp"
#include "pni/train.hpp"

namespace pni {

struct DatasetConfig {
  std::string format = "synthetic";  // "synthetic" or "idx"
  SyntheticConfig synthetic;
  std::size_t train_samples = 5000;
  std::size_t test_samples = 500;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t classes = 0;  // idx only; 0 infers
};

struct ModelEntry {
  std::string name;
  ModelSpec spec;
  std::optional<std::filesystem::path> checkpoint;  // start from this state
  TrainConfig train;
};

struct EvaluationConfig {
  std::size_t trials = 5;
  bool noise_at_test = true;
  std::size_t chunk = 100;
  std::vector<std::string> attacks{"none", "fgsm", "pgd"};
  std::vector<double> epsilon_grid;
  std::vector<double> step_grid;
  std::vector<std::string> sweep_models;  // empty: every model

  std::optional<std::string> checklist_model;
  std::optional<std::string> checklist_source;
  std::vector<double> checklist_epsilon_grid;

  std::vector<std::pair<std::string, std::string>> transfer;  // (source, target)

  std::vector<std::string> cw_models;
  std::size_t cw_samples = 200;
  CwConfig cw;

  std::vector<std::string> zoo_models;
  std::size_t zoo_samples = 200;
  ZooConfig zoo;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "pni_output";
  DatasetConfig dataset;
  AttackConfig attack;  // evaluation PGD/FGSM
  std::vector<ModelEntry> models;
  EvaluationConfig evaluation;
  std::size_t threads = 1;

  /// Relative paths in `j` resolve against `base_dir`. Throws ConfigError
  /// naming the offending field.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  const ModelEntry& model(const std::string& name) const;
};

/// Reads and validates a JSON config file. The output directory defaults to
/// $PNI_OUTPUT_DIR, then "pni_output", unless the file sets one.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Command-line overrides applied after loading.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> epsilon;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> trials;
  bool no_pni_at_test = false;
  std::optional<std::size_t> threads;
  std::optional<std::filesystem::path> output;
};
void apply_overrides(ExperimentConfig& config, const Overrides& overrides);

struct Datasets {
  Dataset train;
  Dataset test;
};
Datasets load_datasets(const DatasetConfig& config, std::uint64_t seed);

using Log = std::function<void(const std::string&)>;

/// Trains (or resumes) every model in the config, or only `only` when set.
/// Writes checkpoints/<name>.ckpt, train_<name>.jsonl and
/// alpha_trajectory.csv under the output directory.
std::map<std::string, TrainState> train_models(const ExperimentConfig& config, const Datasets& data,
                                               const std::optional<std::string>& only = std::nullopt,
                                               const Log& log = {});

/// Loads checkpoints/<name>.ckpt for each named model (all when empty).
std::map<std::string, TrainState> load_models(const ExperimentConfig& config, const std::vector<std::string>& names = {});

/// Report sections produced by run_evaluation.
struct Phases {
  bool accuracy = true;
  bool sweeps = true;
  bool checklist = true;
  bool transfer = true;
  bool cw = true;
  bool zoo = true;
  /// Output names: <report>.jsonl and <report>_summary.txt, or
  /// report.jsonl and summary.txt for the default.
  std::string report = "report";
};

/// Runs the requested evaluations and writes report.jsonl, summary.txt and
/// curve_<model>_<axis>.csv. Returns the report records.
std::vector<nlohmann::ordered_json> run_evaluation(const ExperimentConfig& config, const std::map<std::string, TrainState>& models,
                                                   const Dataset& test, const Phases& phases, const Log& log = {});

/// Full pipeline: datasets, training, evaluation.
std::vector<nlohmann::ordered_json> run_experiment(const ExperimentConfig& config, const Log& log = {});

/// Writes one record per line.
void write_report(const std::filesystem::path& path, const std::vector<nlohmann::ordered_json>& records);
std::string summary_table(const std::vector<nlohmann::ordered_json>& records);

}  // namespace pni
