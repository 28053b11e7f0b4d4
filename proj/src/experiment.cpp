#include "pni/experiment.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "pni/checkpoint.hpp"
#include "pni/error.hpp"

namespace pni {
namespace {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("expected an object", path);
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.contains(key)) throw ConfigError("unknown key", path.empty() ? key : path + "." + key);
  }
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

template <typename T>
T get(const json& j, const std::string& path, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("has the wrong type", join(path, key));
  }
}

template <typename T>
T require(const json& j, const std::string& path, const std::string& key) {
  if (!j.contains(key)) throw ConfigError("is required", join(path, key));
  return get<T>(j, path, key, T{});
}

std::size_t get_count(const json& j, const std::string& path, const std::string& key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("must be a non-negative integer", join(path, key));
  return v.get<std::size_t>();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

AttackConfig parse_attack(const json& j, const std::string& path, AttackConfig a) {
  check_keys(j, path, {"epsilon", "step_size", "n_step", "random_start", "pni_in_generation"});
  a.epsilon = get(j, path, "epsilon", a.epsilon);
  a.step_size = get(j, path, "step_size", a.step_size);
  a.n_step = get_count(j, path, "n_step", a.n_step);
  a.random_start = get(j, path, "random_start", a.random_start);
  a.with_pni_in_generation = get(j, path, "pni_in_generation", a.with_pni_in_generation);
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.message(), join(path, e.field()));
  }
  return a;
}

TrainConfig parse_train(const json& j, const std::string& path) {
  check_keys(j, path,
             {"epochs", "batch_size", "lr", "lr_decay_epochs", "lr_decay_factor", "momentum", "weight_decay", "w_c",
              "w_a", "alpha_grad_clip", "attack"});
  TrainConfig t;
  t.epochs = get_count(j, path, "epochs", t.epochs);
  t.batch_size = get_count(j, path, "batch_size", t.batch_size);
  t.lr.initial = get(j, path, "lr", t.lr.initial);
  t.lr.decay_epochs = get(j, path, "lr_decay_epochs", t.lr.decay_epochs);
  t.lr.decay_factor = get(j, path, "lr_decay_factor", t.lr.decay_factor);
  t.momentum = get(j, path, "momentum", t.momentum);
  t.weight_decay = get(j, path, "weight_decay", t.weight_decay);
  t.w_c = get(j, path, "w_c", t.w_c);
  t.w_a = get(j, path, "w_a", t.w_a);
  if (j.contains("alpha_grad_clip") && !j.at("alpha_grad_clip").is_null()) {
    t.alpha_grad_clip = get(j, path, "alpha_grad_clip", 0.0);
  }
  if (j.contains("attack")) t.attack = parse_attack(j.at("attack"), join(path, "attack"), t.attack);
  try {
    t.validate();
  } catch (const ConfigError& e) {
    const std::string field = e.field().starts_with("train.") ? e.field().substr(6) : e.field();
    throw ConfigError(e.message(), join(path, field));
  }
  return t;
}

// Image extent from an IDX header, so models can be built before loading.
std::pair<std::size_t, std::size_t> idx_extent(const std::filesystem::path& images, const std::string& field) {
  std::ifstream in(images, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + images.string() + "'", field);
  unsigned char h[16];
  if (!in.read(reinterpret_cast<char*>(h), 16)) throw FormatError("truncated IDX header in " + images.string(), 0);
  auto u32 = [&](int at) {
    return (std::size_t{h[at]} << 24) | (std::size_t{h[at + 1]} << 16) | (std::size_t{h[at + 2]} << 8) | h[at + 3];
  };
  return {u32(8), u32(12)};
}

std::uint64_t stream_id(const std::string& text) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::uint64_t seed_for(std::uint64_t seed, const std::string& what) { return Rng(seed).derive(stream_id(what)).next_u64(); }

// Identity of everything that determines a model's training run.
std::string training_key(const ExperimentConfig& c, const ModelEntry& m) {
  ojson j;
  j["seed"] = c.seed;
  j["spec"] = to_json(m.spec);
  const auto& t = m.train;
  j["train"] = {{"epochs_scheduled", t.lr.decay_epochs}, {"lr", t.lr.initial}, {"decay", t.lr.decay_factor},
                {"batch", t.batch_size}, {"momentum", t.momentum}, {"wd", t.weight_decay}, {"w_c", t.w_c},
                {"w_a", t.w_a}, {"eps", t.attack.epsilon}, {"step", t.attack.step_size}, {"n_step", t.attack.n_step},
                {"gen_noise", t.attack.with_pni_in_generation}, {"random_start", t.attack.random_start},
                {"clip", t.alpha_grad_clip ? *t.alpha_grad_clip : -1.0}};
  const auto& d = c.dataset;
  j["data"] = {{"format", d.format}, {"train", d.train_samples}, {"images", d.train_images.string()}};
  if (d.format == "synthetic") {
    const auto& s = d.synthetic;
    j["synthetic"] = {s.classes, s.height, s.width, s.ring_radius, s.blob_width, s.jitter, s.amplitude_min,
                      s.pixel_noise, s.seed};
  }
  return std::to_string(stream_id(j.dump()));
}

std::string fixed(double v, int digits = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string(), "output_dir");
  out << text;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  check_keys(j, "", {"seed", "output_dir", "threads", "dataset", "attack", "train", "models", "evaluation"});
  ExperimentConfig c;
  c.seed = get<std::uint64_t>(j, "", "seed", 0);
  if (j.contains("output_dir")) c.output_dir = resolve(base_dir, require<std::string>(j, "", "output_dir"));
  c.threads = std::max<std::size_t>(1, get_count(j, "", "threads", 1));

  // dataset
  if (!j.contains("dataset")) throw ConfigError("is required", "dataset");
  const json& d = j.at("dataset");
  check_keys(d, "dataset",
             {"format", "classes", "height", "width", "train_samples", "test_samples", "ring_radius", "blob_width",
              "jitter", "amplitude_min", "pixel_noise", "seed", "train_images", "train_labels", "test_images",
              "test_labels"});
  DatasetConfig& ds = c.dataset;
  ds.format = get<std::string>(d, "dataset", "format", "synthetic");
  ds.train_samples = get_count(d, "dataset", "train_samples", ds.train_samples);
  ds.test_samples = get_count(d, "dataset", "test_samples", ds.test_samples);
  std::size_t channels = 1, height = 0, width = 0;
  if (ds.format == "synthetic") {
    auto& s = ds.synthetic;
    s.classes = get_count(d, "dataset", "classes", s.classes);
    s.height = get_count(d, "dataset", "height", s.height);
    s.width = get_count(d, "dataset", "width", s.width);
    s.ring_radius = get(d, "dataset", "ring_radius", s.ring_radius);
    s.blob_width = get(d, "dataset", "blob_width", s.blob_width);
    s.jitter = get(d, "dataset", "jitter", s.jitter);
    s.amplitude_min = get(d, "dataset", "amplitude_min", s.amplitude_min);
    s.pixel_noise = get(d, "dataset", "pixel_noise", s.pixel_noise);
    s.seed = get<std::uint64_t>(d, "dataset", "seed", c.seed);
    try {
      s.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(e.message(), "dataset." + e.field().substr(e.field().find('.') + 1));
    }
    height = s.height;
    width = s.width;
    ds.classes = s.classes;
  } else if (ds.format == "idx") {
    for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"}) {
      const auto p = resolve(base_dir, require<std::string>(d, "dataset", key));
      if (!std::filesystem::exists(p)) throw ConfigError("file not found: " + p.string(), std::string("dataset.") + key);
      if (std::string(key) == "train_images") ds.train_images = p;
      if (std::string(key) == "train_labels") ds.train_labels = p;
      if (std::string(key) == "test_images") ds.test_images = p;
      if (std::string(key) == "test_labels") ds.test_labels = p;
    }
    ds.classes = get_count(d, "dataset", "classes", 10);
    std::tie(height, width) = idx_extent(ds.train_images, "dataset.train_images");
  } else {
    throw ConfigError("must be 'synthetic' or 'idx'", "dataset.format");
  }

  if (j.contains("attack")) c.attack = parse_attack(j.at("attack"), "attack", c.attack);

  // models
  const json train_defaults = j.contains("train") ? j.at("train") : json::object();
  if (!j.contains("models") || !j.at("models").is_array() || j.at("models").empty()) {
    throw ConfigError("must be a non-empty array", "models");
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < j.at("models").size(); ++i) {
    const json& m = j.at("models")[i];
    const std::string path = "models[" + std::to_string(i) + "]";
    check_keys(m, path, {"name", "placement", "width", "spec", "checkpoint", "train"});
    ModelEntry e;
    e.name = require<std::string>(m, path, "name");
    if (e.name.empty() || e.name.find_first_of("/\\ ") != std::string::npos) {
      throw ConfigError("must be a non-empty name without spaces or slashes", path + ".name");
    }
    if (!names.insert(e.name).second) throw ConfigError("duplicate model name '" + e.name + "'", path + ".name");
    if (m.contains("spec")) {
      try {
        e.spec = model_spec_from_json(m.at("spec"));
      } catch (const ConfigError& err) {
        throw ConfigError(err.message(), path + ".spec");
      }
    } else {
      Placement p = Placement::None;
      try {
        p = parse_placement(get<std::string>(m, path, "placement", "none"));
      } catch (const ConfigError& err) {
        throw ConfigError(err.message(), path + ".placement");
      }
      e.spec = ModelSpec::desk_cnn(channels, height, width, ds.classes, p, std::max<std::size_t>(1, get_count(m, path, "width", 1)));
    }
    if (m.contains("checkpoint")) e.checkpoint = resolve(base_dir, require<std::string>(m, path, "checkpoint"));
    json merged = train_defaults;
    if (m.contains("train")) merged.merge_patch(m.at("train"));
    e.train = parse_train(merged, path + ".train");
    e.train.seed = seed_for(c.seed, "train/" + e.name);
    c.models.push_back(std::move(e));
  }

  // evaluation
  if (j.contains("evaluation")) {
    const json& ev = j.at("evaluation");
    check_keys(ev, "evaluation",
               {"trials", "noise_at_test", "chunk", "attacks", "sweeps", "checklist", "transfer", "cw", "zoo"});
    EvaluationConfig& e = c.evaluation;
    e.trials = get_count(ev, "evaluation", "trials", e.trials);
    if (e.trials == 0) throw ConfigError("must be >= 1", "evaluation.trials");
    e.noise_at_test = get(ev, "evaluation", "noise_at_test", e.noise_at_test);
    e.chunk = std::max<std::size_t>(1, get_count(ev, "evaluation", "chunk", e.chunk));
    e.attacks = get(ev, "evaluation", "attacks", e.attacks);
    for (const auto& a : e.attacks) {
      try {
        parse_attack_kind(a);
      } catch (const ConfigError& err) {
        throw ConfigError(err.message(), "evaluation.attacks");
      }
    }
    auto known = [&](const std::string& name, const std::string& field) {
      if (!names.contains(name)) throw ConfigError("unknown model '" + name + "'", field);
    };
    if (ev.contains("sweeps")) {
      const json& s = ev.at("sweeps");
      check_keys(s, "evaluation.sweeps", {"epsilon", "n_step", "models"});
      e.epsilon_grid = get(s, "evaluation.sweeps", "epsilon", e.epsilon_grid);
      e.step_grid = get(s, "evaluation.sweeps", "n_step", e.step_grid);
      e.sweep_models = get(s, "evaluation.sweeps", "models", e.sweep_models);
      for (const auto& n : e.sweep_models) known(n, "evaluation.sweeps.models");
      for (const auto* grid : {&e.epsilon_grid, &e.step_grid}) {
        for (std::size_t i = 1; i < grid->size(); ++i) {
          if (!((*grid)[i] > (*grid)[i - 1])) throw ConfigError("grid must be strictly increasing", "evaluation.sweeps");
        }
      }
    }
    if (ev.contains("checklist")) {
      const json& s = ev.at("checklist");
      check_keys(s, "evaluation.checklist", {"model", "source", "epsilon"});
      e.checklist_model = require<std::string>(s, "evaluation.checklist", "model");
      e.checklist_source = require<std::string>(s, "evaluation.checklist", "source");
      known(*e.checklist_model, "evaluation.checklist.model");
      known(*e.checklist_source, "evaluation.checklist.source");
      e.checklist_epsilon_grid = get(s, "evaluation.checklist", "epsilon", e.epsilon_grid);
      if (e.checklist_epsilon_grid.size() < 2) throw ConfigError("needs at least two points", "evaluation.checklist.epsilon");
    }
    if (ev.contains("transfer")) {
      if (!ev.at("transfer").is_array()) throw ConfigError("must be an array", "evaluation.transfer");
      for (std::size_t i = 0; i < ev.at("transfer").size(); ++i) {
        const json& t = ev.at("transfer")[i];
        const std::string path = "evaluation.transfer[" + std::to_string(i) + "]";
        check_keys(t, path, {"source", "target"});
        e.transfer.emplace_back(require<std::string>(t, path, "source"), require<std::string>(t, path, "target"));
        known(e.transfer.back().first, path + ".source");
        known(e.transfer.back().second, path + ".target");
      }
    }
    if (ev.contains("cw")) {
      const json& s = ev.at("cw");
      const std::string path = "evaluation.cw";
      check_keys(s, path, {"models", "samples", "initial_c", "confidence_k", "binary_search_steps", "inner_iterations",
                           "learning_rate"});
      e.cw_models = get(s, path, "models", e.cw_models);
      for (const auto& n : e.cw_models) known(n, path + ".models");
      e.cw_samples = get_count(s, path, "samples", e.cw_samples);
      e.cw.initial_c = get(s, path, "initial_c", e.cw.initial_c);
      e.cw.confidence_k = get(s, path, "confidence_k", e.cw.confidence_k);
      e.cw.binary_search_steps = get_count(s, path, "binary_search_steps", e.cw.binary_search_steps);
      e.cw.inner_iterations = get_count(s, path, "inner_iterations", e.cw.inner_iterations);
      e.cw.learning_rate = get(s, path, "learning_rate", e.cw.learning_rate);
      try {
        e.cw.validate();
      } catch (const ConfigError& err) {
        throw ConfigError(err.message(), path + "." + err.field());
      }
    }
    if (ev.contains("zoo")) {
      const json& s = ev.at("zoo");
      const std::string path = "evaluation.zoo";
      check_keys(s, path, {"models", "samples", "iterations", "coordinate_batch", "h", "learning_rate", "c",
                           "confidence_k"});
      e.zoo_models = get(s, path, "models", e.zoo_models);
      for (const auto& n : e.zoo_models) known(n, path + ".models");
      e.zoo_samples = get_count(s, path, "samples", e.zoo_samples);
      e.zoo.iterations = get_count(s, path, "iterations", e.zoo.iterations);
      e.zoo.coordinate_batch = get_count(s, path, "coordinate_batch", e.zoo.coordinate_batch);
      e.zoo.h = get(s, path, "h", e.zoo.h);
      e.zoo.learning_rate = get(s, path, "learning_rate", e.zoo.learning_rate);
      e.zoo.c = get(s, path, "c", e.zoo.c);
      e.zoo.confidence_k = get(s, path, "confidence_k", e.zoo.confidence_k);
      try {
        e.zoo.validate();
      } catch (const ConfigError& err) {
        throw ConfigError(err.message(), path + "." + err.field());
      }
    }
  }
  return c;
}

const ModelEntry& ExperimentConfig::model(const std::string& name) const {
  for (const auto& m : models) {
    if (m.name == name) return m;
  }
  throw ConfigError("unknown model '" + name + "'", "models");
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string(), "config");
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("parse error: ") + e.what(), "config");
  }
  ExperimentConfig c = ExperimentConfig::from_json(j, path.parent_path());
  if (!j.contains("output_dir")) {
    const char* env = std::getenv("PNI_OUTPUT_DIR");
    c.output_dir = env && *env ? std::filesystem::path(env) : std::filesystem::path("pni_output");
  }
  return c;
}

void apply_overrides(ExperimentConfig& config, const Overrides& o) {
  if (o.seed) {
    const bool dataset_follows = config.dataset.synthetic.seed == config.seed;
    config.seed = *o.seed;
    if (dataset_follows) config.dataset.synthetic.seed = *o.seed;
    for (auto& m : config.models) m.train.seed = seed_for(config.seed, "train/" + m.name);
  }
  if (o.epsilon) {
    const double ratio = config.attack.epsilon > 0.0 ? config.attack.step_size / config.attack.epsilon : 0.25;
    config.attack.epsilon = *o.epsilon;
    config.attack.step_size = ratio * *o.epsilon;
  }
  if (o.steps) config.attack.n_step = *o.steps;
  if (o.trials) config.evaluation.trials = *o.trials;
  if (o.no_pni_at_test) config.evaluation.noise_at_test = false;
  if (o.threads) config.threads = std::max<std::size_t>(1, *o.threads);
  if (o.output) config.output_dir = *o.output;
  try {
    config.attack.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.message(), "attack." + e.field());
  }
  if (config.evaluation.trials == 0) throw ConfigError("must be >= 1", "evaluation.trials");
}

Datasets load_datasets(const DatasetConfig& config, std::uint64_t) {
  Datasets out;
  if (config.format == "synthetic") {
    SyntheticConfig s = config.synthetic;
    s.samples = config.train_samples;
    out.train = make_synthetic(s, "train");
    s.samples = config.test_samples;
    out.test = make_synthetic(s, "test");
  } else {
    out.train = load_idx(config.train_images, config.train_labels, "train", config.classes);
    out.test = load_idx(config.test_images, config.test_labels, "test", config.classes);
    if (config.train_samples > 0 && config.train_samples < out.train.size()) out.train = out.train.slice(0, config.train_samples);
    if (config.test_samples > 0 && config.test_samples < out.test.size()) out.test = out.test.slice(0, config.test_samples);
  }
  out.train.validate();
  out.test.validate();
  return out;
}

std::map<std::string, TrainState> train_models(const ExperimentConfig& config, const Datasets& data,
                                               const std::optional<std::string>& only, const Log& log) {
  namespace fs = std::filesystem;
  const fs::path dir = config.output_dir;
  fs::create_directories(dir / "checkpoints");
  std::map<std::string, TrainState> out;
  for (const auto& m : config.models) {
    if (only && m.name != *only) continue;
    const fs::path ckpt = dir / "checkpoints" / (m.name + ".ckpt");
    const fs::path key_file = dir / "checkpoints" / (m.name + ".key");
    const fs::path log_file = dir / ("train_" + m.name + ".jsonl");
    const std::string key = training_key(config, m);

    std::optional<TrainState> state;
    if (m.checkpoint) {
      state = load_checkpoint(*m.checkpoint);
      if (!(state->model.spec() == m.spec)) {
        throw ConfigError("checkpoint architecture differs from the configured model", "models." + m.name + ".checkpoint");
      }
    } else if (fs::exists(ckpt) && fs::exists(key_file)) {
      std::ifstream in(key_file);
      std::string stored;
      std::getline(in, stored);
      if (stored == key) {
        state = load_checkpoint(ckpt);
        if (log) log(m.name + ": resuming at epoch " + std::to_string(state->epoch));
      }
    }
    if (!state) {
      state = TrainState::fresh(Model::create(m.spec, seed_for(config.seed, "init/" + m.name)), m.train.seed);
      fs::remove(log_file);
    }
    write_text(key_file, key + "\n");

    std::ofstream epoch_log(log_file, std::ios::app | std::ios::binary);
    train(*state, data.train, m.train, [&](const TrainState& s, const EpochStats& stats) {
      ojson rec = stats.to_json();
      rec["model"] = m.name;
      epoch_log << rec.dump() << '\n';
      epoch_log.flush();
      save_checkpoint(s, ckpt);
      if (log) {
        std::string msg = m.name + ": epoch " + std::to_string(stats.epoch) + " loss " + fixed(stats.loss, 4) + " clean " +
                          fixed(100 * stats.clean_accuracy) + "% adv " + fixed(100 * stats.adv_accuracy) + "%";
        for (const auto& [id, v] : stats.alpha) msg += " " + id + "=" + fixed(v, 4);
        log(msg);
      }
    });
    if (!fs::exists(ckpt) || m.checkpoint) save_checkpoint(*state, ckpt);
    out.emplace(m.name, std::move(*state));
  }

  // Alpha trajectories of every model with a training log.
  std::ostringstream csv;
  csv << "model,epoch,coefficient,alpha\n";
  for (const auto& m : config.models) {
    std::ifstream in(dir / ("train_" + m.name + ".jsonl"));
    std::string line;
    while (std::getline(in, line)) {
      const auto rec = ojson::parse(line);
      for (const auto& [id, v] : rec.at("alpha").items()) {
        csv << m.name << ',' << rec.at("epoch").get<std::size_t>() << ',' << id << ',' << std::setprecision(10)
            << v.get<double>() << '\n';
      }
    }
  }
  write_text(dir / "alpha_trajectory.csv", csv.str());
  return out;
}

std::map<std::string, TrainState> load_models(const ExperimentConfig& config, const std::vector<std::string>& names) {
  std::map<std::string, TrainState> out;
  for (const auto& m : config.models) {
    if (!names.empty() && std::find(names.begin(), names.end(), m.name) == names.end()) continue;
    const auto path = m.checkpoint ? *m.checkpoint : config.output_dir / "checkpoints" / (m.name + ".ckpt");
    if (!std::filesystem::exists(path)) {
      throw ConfigError("no checkpoint at " + path.string() + "; run 'train' first", "models." + m.name);
    }
    out.emplace(m.name, load_checkpoint(path));
  }
  return out;
}

std::vector<ojson> run_evaluation(const ExperimentConfig& config, const std::map<std::string, TrainState>& models,
                                  const Dataset& test, const Phases& phases, const Log& log) {
  namespace fs = std::filesystem;
  fs::create_directories(config.output_dir);
  const auto& ev = config.evaluation;
  auto options = [&](const std::string& what) {
    EvalOptions o;
    o.trials = ev.trials;
    o.noise_at_test = ev.noise_at_test;
    o.seed = seed_for(config.seed, "eval/" + what);
    o.chunk = ev.chunk;
    o.threads = config.threads;
    return o;
  };
  auto model = [&](const std::string& name) -> const Model& {
    auto it = models.find(name);
    if (it == models.end()) throw ConfigError("model '" + name + "' was not loaded", "models");
    return it->second.model;
  };
  auto note = [&](const std::string& s) {
    if (log) log(s);
  };

  std::vector<ojson> records;
  records.push_back({{"record", "meta"},
                     {"seed", config.seed},
                     {"trials", ev.trials},
                     {"noise_at_test", ev.noise_at_test},
                     {"test_samples", test.size()},
                     {"classes", test.classes},
                     {"attack", {{"epsilon", config.attack.epsilon}, {"step_size", config.attack.step_size}, {"n_step", config.attack.n_step}}}});

  for (const auto& [name, state] : models) {
    for (const auto& c : state.model.coefficients()) {
      records.push_back({{"record", "alpha"}, {"model", name}, {"coefficient", c.layer_id}, {"alpha", c.value()},
                         {"abs_alpha", std::abs(c.value())}});
    }
  }

  if (phases.accuracy) {
    for (const auto& [name, state] : models) {
      for (const auto& a : ev.attacks) {
        const AttackKind kind = parse_attack_kind(a);
        AttackConfig cfg = config.attack;
        if (kind == AttackKind::Fgsm) {
          cfg.n_step = 1;
          cfg.step_size = cfg.epsilon;
        }
        note("accuracy: " + name + " / " + a);
        const MeanStd acc = eval_accuracy(state.model, test, kind, cfg, options("acc/" + name + "/" + a));
        const bool none = kind == AttackKind::None;
        records.push_back({{"record", "accuracy"}, {"model", name}, {"attack", to_string(kind)},
                           {"epsilon", none ? 0.0 : cfg.epsilon}, {"n_step", none ? 0 : cfg.n_step},
                           {"noise_at_test", ev.noise_at_test}, {"mean", acc.mean}, {"std", acc.std}, {"trials", acc.trials}});
      }
    }
  }

  if (phases.sweeps) {
    for (const auto& [name, state] : models) {
      if (!ev.sweep_models.empty() && std::find(ev.sweep_models.begin(), ev.sweep_models.end(), name) == ev.sweep_models.end()) {
        continue;
      }
      for (const auto& [axis, grid] : {std::pair{std::string("epsilon"), ev.epsilon_grid}, std::pair{std::string("n_step"), ev.step_grid}}) {
        if (grid.empty()) continue;
        note("sweep: " + name + " / " + axis);
        const Curve curve = sweep(state.model, test, axis, grid, config.attack, options("sweep/" + name + "/" + axis));
        write_text(config.output_dir / ("curve_" + name + "_" + axis + ".csv"), curve.to_csv());
        ojson rec = to_json(curve);
        rec["record"] = "curve";
        rec["model"] = name;
        records.push_back(rec);
      }
    }
  }

  if (phases.transfer) {
    for (const auto& [source, target] : ev.transfer) {
      note("transfer: " + source + " => " + target);
      const MeanStd acc = eval_transfer(model(source), model(target), test, config.attack,
                                        options("transfer/" + source + "/" + target));
      records.push_back({{"record", "transfer"}, {"source", source}, {"target", target},
                         {"epsilon", config.attack.epsilon}, {"n_step", config.attack.n_step}, {"mean", acc.mean},
                         {"std", acc.std}, {"trials", acc.trials}});
    }
  }

  if (phases.checklist && ev.checklist_model) {
    note("checklist: " + *ev.checklist_model);
    ChecklistOptions co;
    co.pgd = config.attack;
    co.epsilon_grid = ev.checklist_epsilon_grid;
    const ChecklistReport rep = obfuscation_checklist(model(*ev.checklist_model), model(*ev.checklist_source), test, co,
                                                      options("checklist/" + *ev.checklist_model));
    records.push_back({{"record", "checklist"}, {"model", *ev.checklist_model}, {"source", *ev.checklist_source},
                       {"passed", rep.all_passed()}, {"items", to_json(rep)}});
  }

  const Dataset cw_set = test.slice(0, std::min(ev.cw_samples, test.size()));
  if (phases.cw) {
    for (const auto& name : ev.cw_models) {
      note("cw: " + name);
      EvalOptions o = options("cw/" + name);
      const CwSummary s = eval_cw(model(name), cw_set, ev.cw, o);
      std::ofstream out(config.output_dir / ("attacks_" + name + "_cw.jsonl"), std::ios::binary);
      write_attack_records(out, s.batch);
      records.push_back({{"record", "cw"}, {"model", name}, {"samples", s.samples}, {"success_rate", s.success_rate},
                         {"mean_l2", s.mean_l2}});
    }
  }
  const Dataset zoo_set = test.slice(0, std::min(ev.zoo_samples, test.size()));
  if (phases.zoo) {
    for (const auto& name : ev.zoo_models) {
      note("zoo: " + name);
      const ZooSummary s = eval_zoo(model(name), zoo_set, ev.zoo, options("zoo/" + name));
      std::ofstream out(config.output_dir / ("attacks_" + name + "_zoo.jsonl"), std::ios::binary);
      write_attack_records(out, s.batch);
      records.push_back({{"record", "zoo"}, {"model", name}, {"samples", s.samples}, {"success_rate", s.success_rate},
                         {"mean_queries", s.mean_queries}});
    }
  }

  write_report(config.output_dir / (phases.report + ".jsonl"), records);
  const std::string summary = phases.report == "report" ? "summary.txt" : phases.report + "_summary.txt";
  write_text(config.output_dir / summary, summary_table(records));
  return records;
}

std::vector<ojson> run_experiment(const ExperimentConfig& config, const Log& log) {
  const Datasets data = load_datasets(config.dataset, config.seed);
  const auto models = train_models(config, data, std::nullopt, log);
  return run_evaluation(config, models, data.test, Phases{}, log);
}

void write_report(const std::filesystem::path& path, const std::vector<ojson>& records) {
  std::ostringstream s;
  for (const auto& r : records) s << r.dump() << '\n';
  write_text(path, s.str());
}

std::string summary_table(const std::vector<ojson>& records) {
  std::ostringstream s;
  auto pct = [](const ojson& r) { return fixed(r.at("mean").get<double>()) + " +- " + fixed(r.at("std").get<double>()); };
  s << "Accuracy (%), mean +- std over trials\n";
  s << std::left << std::setw(20) << "model" << std::setw(8) << "attack" << std::setw(10) << "epsilon" << std::setw(8)
    << "steps" << "accuracy\n";
  for (const auto& r : records) {
    if (r.at("record") != "accuracy") continue;
    s << std::left << std::setw(20) << r.at("model").get<std::string>() << std::setw(8) << r.at("attack").get<std::string>()
      << std::setw(10) << fixed(r.at("epsilon").get<double>(), 3) << std::setw(8) << r.at("n_step").get<std::size_t>()
      << pct(r) << '\n';
  }
  for (const auto& r : records) {
    const std::string kind = r.at("record");
    if (kind == "transfer") {
      s << "\nTransfer " << r.at("source").get<std::string>() << " => " << r.at("target").get<std::string>() << ": " << pct(r)
        << '\n';
    } else if (kind == "curve") {
      s << "\nCurve " << r.at("model").get<std::string>() << " over " << r.at("axis").get<std::string>() << '\n';
      for (const auto& p : r.at("points")) {
        s << "  " << std::setw(10) << fixed(p.at("x").get<double>(), 3) << pct(p) << '\n';
      }
    } else if (kind == "checklist") {
      s << "\nObfuscation checklist on " << r.at("model").get<std::string>() << " (transfer source "
        << r.at("source").get<std::string>() << ")\n";
      for (const auto& item : r.at("items")) {
        s << "  [" << (item.at("passed").get<bool>() ? "pass" : "FAIL") << "] " << item.at("item").get<int>() << ". "
          << item.at("name").get<std::string>() << '\n';
      }
    } else if (kind == "cw") {
      s << "\nC&W L2 on " << r.at("model").get<std::string>() << ": success " << fixed(r.at("success_rate").get<double>())
        << "%, mean L2 " << fixed(r.at("mean_l2").get<double>(), 4) << " over " << r.at("samples").get<std::size_t>()
        << " samples\n";
    } else if (kind == "zoo") {
      s << "\nZOO on " << r.at("model").get<std::string>() << ": success " << fixed(r.at("success_rate").get<double>())
        << "%, mean queries " << fixed(r.at("mean_queries").get<double>(), 1) << " over "
        << r.at("samples").get<std::size_t>() << " samples\n";
    }
  }
  bool header = false;
  for (const auto& r : records) {
    if (r.at("record") != "alpha") continue;
    if (!header) s << "\nNoise coefficients\n";
    header = true;
    s << "  " << std::setw(20) << r.at("model").get<std::string>() << std::setw(10) << r.at("coefficient").get<std::string>()
      << fixed(r.at("alpha").get<double>(), 4) << '\n';
  }
  return s.str();
}

}  // namespace pni
