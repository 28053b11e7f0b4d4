// pni: train, attack and evaluate noise-injection models from a JSON config.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pni/attacks.hpp"
#include "pni/error.hpp"
#include "pni/experiment.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> epsilon;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> trials;
  std::optional<std::size_t> threads;
  std::optional<std::string> output;
  bool no_pni_at_test = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override the experiment seed");
  cmd->add_option("--epsilon", c.epsilon, "override the attack bound (step size keeps its ratio)");
  cmd->add_option("--steps", c.steps, "override the number of PGD steps");
  cmd->add_option("--trials", c.trials, "override the number of evaluation trials");
  cmd->add_flag("--no-pni-at-test", c.no_pni_at_test, "disable noise injection during evaluation");
  cmd->add_option("--threads", c.threads, "worker threads for evaluation (results do not depend on it)");
  cmd->add_option("-o,--output", c.output, "output directory");
  cmd->add_flag("-q,--quiet", c.quiet, "no progress messages");
}

pni::ExperimentConfig load(const Common& c) {
  pni::ExperimentConfig config = pni::load_experiment_config(c.config);
  pni::Overrides o;
  o.seed = c.seed;
  o.epsilon = c.epsilon;
  o.steps = c.steps;
  o.trials = c.trials;
  o.no_pni_at_test = c.no_pni_at_test;
  o.threads = c.threads;
  if (c.output) o.output = std::filesystem::path(*c.output);
  pni::apply_overrides(config, o);
  return config;
}

pni::Log logger(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& s) { std::cerr << s << '\n'; };
}

void print_summary(const std::vector<nlohmann::ordered_json>& records, const pni::ExperimentConfig& config,
                   const std::string& report) {
  std::cout << pni::summary_table(records);
  std::cout << "\nwrote " << (config.output_dir / (report + ".jsonl")).string() << '\n';
}

int run_attack(const pni::ExperimentConfig& config, const std::string& kind, const std::vector<std::string>& names,
               const pni::Log& log) {
  const pni::Datasets data = pni::load_datasets(config.dataset, config.seed);
  const auto models = pni::load_models(config, names);
  if (kind == "cw" || kind == "zoo") {
    pni::ExperimentConfig c = config;
    std::vector<std::string> chosen;
    for (const auto& [name, state] : models) chosen.push_back(name);
    (kind == "cw" ? c.evaluation.cw_models : c.evaluation.zoo_models) = chosen;
    pni::Phases phases{false, false, false, false, kind == "cw", kind == "zoo", "report_attack_" + kind};
    const auto records = pni::run_evaluation(c, models, data.test, phases, log);
    print_summary(records, c, phases.report);
    return kOk;
  }
  pni::AttackConfig cfg = config.attack;
  if (kind == "fgsm") {
    cfg.n_step = 1;
    cfg.step_size = cfg.epsilon;
  }
  std::filesystem::create_directories(config.output_dir);
  for (const auto& [name, state] : models) {
    pni::Rng rng(config.seed);
    const auto x = data.test.all_inputs();
    cfg.with_pni_in_generation = config.evaluation.noise_at_test;
    const pni::AdversarialBatch batch = pni::pgd(state.model, x, data.test.labels, cfg, rng);
    const auto path = config.output_dir / ("attacks_" + name + "_" + kind + ".jsonl");
    std::ofstream out(path, std::ios::binary);
    pni::write_attack_records(out, batch);
    std::cout << name << ": " << kind << " eps " << cfg.epsilon << " steps " << cfg.n_step << " accuracy "
              << 100.0 * batch.accuracy() << "% success " << 100.0 * batch.success_rate() << "%  -> " << path.string()
              << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parametric noise injection: adversarial training and robustness evaluation"};
  app.require_subcommand(1);

  Common common;
  std::optional<std::string> only_model;
  std::vector<std::string> models;
  std::string attack_kind = "pgd";
  std::string axis;
  std::string dataset_out;

  auto* train = app.add_subcommand("train", "train (or resume) the configured models");
  add_common(train, common);
  train->add_option("--model", only_model, "train only this model");

  auto* eval = app.add_subcommand("eval", "accuracy and transfer evaluation of trained models");
  add_common(eval, common);
  eval->add_option("--model", models, "models to evaluate (default: all)");

  auto* attack = app.add_subcommand("attack", "run one attack and write per-sample records");
  add_common(attack, common);
  attack->add_option("--kind", attack_kind, "attack")->check(CLI::IsMember({"fgsm", "pgd", "cw", "zoo"}));
  attack->add_option("--model", models, "models to attack (default: all)");

  auto* sweep = app.add_subcommand("sweep", "accuracy curves over epsilon and step grids");
  add_common(sweep, common);
  sweep->add_option("--model", models, "models to sweep (default: the config's list)");
  sweep->add_option("--axis", axis, "only this axis")->check(CLI::IsMember({"epsilon", "n_step"}));

  auto* checklist = app.add_subcommand("checklist", "gradient-obfuscation checklist");
  add_common(checklist, common);

  auto* run = app.add_subcommand("run", "train, then run every configured evaluation");
  add_common(run, common);

  auto* make = app.add_subcommand("make-dataset", "write the configured dataset as IDX files");
  add_common(make, common);
  make->add_option("--out", dataset_out, "directory for the IDX files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    pni::ExperimentConfig config = load(common);
    const pni::Log log = logger(common);

    if (*train) {
      if (only_model) config.model(*only_model);
      const pni::Datasets data = pni::load_datasets(config.dataset, config.seed);
      const auto trained = pni::train_models(config, data, only_model, log);
      for (const auto& [name, state] : trained) {
        std::cout << name << ": epoch " << state.epoch << " -> "
                  << (config.output_dir / "checkpoints" / (name + ".ckpt")).string() << '\n';
      }
      return kOk;
    }
    if (*attack) return run_attack(config, attack_kind, models, log);

    if (*make) {
      const pni::Datasets data = pni::load_datasets(config.dataset, config.seed);
      const std::filesystem::path dir(dataset_out);
      std::filesystem::create_directories(dir);
      pni::save_idx(data.train, dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
      pni::save_idx(data.test, dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
      std::cout << "wrote " << data.train.size() << " training and " << data.test.size() << " test samples to "
                << dir.string() << '\n';
      return kOk;
    }
    if (*run) {
      const auto records = pni::run_experiment(config, log);
      print_summary(records, config, "report");
      return kOk;
    }

    const pni::Datasets data = pni::load_datasets(config.dataset, config.seed);
    pni::Phases phases{false, false, false, false, false, false, "report"};
    std::vector<std::string> names = models;
    if (*eval) {
      phases.accuracy = phases.transfer = true;
      phases.report = "report_eval";
      for (const auto& [s, t] : config.evaluation.transfer) {
        if (!names.empty()) names.insert(names.end(), {s, t});
      }
    } else if (*sweep) {
      phases.sweeps = true;
      phases.report = "report_sweep";
      if (!models.empty()) config.evaluation.sweep_models = models;
      if (axis == "epsilon") config.evaluation.step_grid.clear();
      if (axis == "n_step") config.evaluation.epsilon_grid.clear();
      names = config.evaluation.sweep_models;
    } else if (*checklist) {
      if (!config.evaluation.checklist_model) {
        throw pni::ConfigError("no checklist section in the config", "evaluation.checklist");
      }
      phases.checklist = true;
      phases.report = "report_checklist";
      names = {*config.evaluation.checklist_model, *config.evaluation.checklist_source};
    }
    const auto loaded = pni::load_models(config, names);
    const auto records = pni::run_evaluation(config, loaded, data.test, phases, log);
    print_summary(records, config, phases.report);
    return kOk;
  } catch (const pni::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const pni::FormatError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const pni::IntegrityError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kData;
  } catch (const pni::VersionError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
