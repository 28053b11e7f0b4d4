// Acceptance run on the desk task. Prints one PASS/FAIL line per criterion
// and writes the measured numbers to <output>/acceptance.json.
//
//   acceptance <config.json> <output-dir> [--allow-fail N]...
//
// Criteria named with --allow-fail still print FAIL but do not fail the exit
// status.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <string>

#include "pni/attacks.hpp"
#include "pni/checkpoint.hpp"
#include "pni/error.hpp"
#include "pni/evaluation.hpp"
#include "pni/experiment.hpp"
#include "pni/gradcheck.hpp"
#include "pni/ops.hpp"

using namespace pni;
using ojson = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Outcome {
  int id;
  std::string name;
  bool passed;
  std::string detail;
};

// 1. Parameter and alpha gradients against central differences with the
// noise realization frozen.
Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const Placement placements[] = {Placement::None, Placement::W,          Placement::I,         Placement::A_a,
                                  Placement::A_b,  Placement::W_plus_A_a, Placement::W_plus_A_b};
  Rng rng(2024);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int m = 0; m < 20; ++m) {
    const Placement p = placements[m % 7];
    ModelSpec spec;
    Shape x_shape;
    if (m % 2 == 0) {
      spec = ModelSpec::mlp(6, {5}, 3, p);
      x_shape = {3, 6};
    } else {
      spec.input_shape = {1, 6, 6};
      spec.classes = 3;
      spec.layers = {LayerSpec::conv(1, 2, 3, 2, 1, p), LayerSpec::relu(), LayerSpec::flatten(),
                     LayerSpec::dense(18, 3, p)};
      spec = spec.with_placement(p);
      x_shape = {2, 1, 6, 6};
    }
    Model model = Model::create(spec, 100 + static_cast<std::uint64_t>(m), 0.3);
    std::vector<int> labels;
    for (std::size_t i = 0; i < x_shape[0]; ++i) labels.push_back(static_cast<int>(rng.index(3)));

    // Draw inputs and noise until no ReLU sits near its kink.
    Tensor x;
    NoiseContext recorded = NoiseContext::off();
    for (int attempt = 0;; ++attempt) {
      std::vector<double> v(numel(x_shape));
      for (auto& e : v) e = rng.uniform();
      x = Tensor(x_shape, v);
      recorded = NoiseContext::recording(rng.derive(static_cast<std::uint64_t>(attempt)));
      double margin = std::numeric_limits<double>::infinity();
      ForwardOptions o;
      o.min_relu_margin = &margin;
      model.zero_grad();
      backward(softmax_cross_entropy(model.forward(x, recorded, o), labels));
      if (margin > 1e-3) break;
    }

    auto loss_at = [&] {
      NoiseContext replay = recorded.replaying();
      return softmax_cross_entropy(model.forward(x, replay), labels).item();
    };
    for (auto& prm : model.parameters()) {
      const std::vector<double> analytic(prm.value.grad().begin(), prm.value.grad().end());
      const std::vector<double> original(prm.value.data().begin(), prm.value.data().end());
      const Tensor numeric = finite_diff_grad(
          [&](const Tensor& probe) {
            std::copy(probe.data().begin(), probe.data().end(), prm.value.mutable_data().begin());
            const double l = loss_at();
            std::copy(original.begin(), original.end(), prm.value.mutable_data().begin());
            return l;
          },
          prm.value.detach());
      worst = std::max(worst, max_relative_error(analytic, numeric.data(), 1e-7));
      checked += analytic.size();
    }
    for (auto& c : model.coefficients()) {
      const double analytic = c.alpha.grad()[0];
      const double a0 = c.value(), h = 1e-6;
      c.set_value(a0 + h);
      const double up = loss_at();
      c.set_value(a0 - h);
      const double down = loss_at();
      c.set_value(a0);
      const std::vector<double> a{analytic}, n{(up - down) / (2 * h)};
      worst = std::max(worst, max_relative_error(a, n, 1e-7));
      ++checked;
    }
  }
  const double secs = seconds_since(t0);
  return {1, "gradient correctness", worst < 1e-4 && secs < 60.0,
          std::to_string(checked) + " gradients over 20 models, max rel err " + fmt(worst * 1e6, 3) + "e-6, " +
              fmt(secs, 1) + " s"};
}

double max_abs_alpha(const Model& m) {
  double v = 0.0;
  for (const auto& c : m.coefficients()) v = std::max(v, std::abs(c.value()));
  return v;
}

// 7a. C&W on linear classifiers against the analytic distance to the nearest
// decision hyperplane.
std::pair<bool, std::string> cw_linear_oracle() {
  Rng rng(77);
  double worst = 0.0;
  int models = 0;
  while (models < 5) {
    const std::size_t d = 4, k = 3;
    Model m = Model::create(ModelSpec::mlp(d, {}, k), 500 + rng.index(1000));
    std::vector<double> x(d);
    for (auto& v : x) v = 0.4 + 0.2 * rng.uniform();
    NoiseContext off = NoiseContext::off();
    const Tensor xt({1, d}, x);
    const int t = argmax_rows(m.forward(xt, off))[0];
    const auto w = m.parameter("fc0.weight").data();  // [d x k]
    const auto b = m.parameter("fc0.bias").data();
    double dist = std::numeric_limits<double>::infinity();
    std::size_t nearest = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<int>(j) == t) continue;
      double gap = b[static_cast<std::size_t>(t)] - b[j], norm = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double dw = w[i * k + static_cast<std::size_t>(t)] - w[i * k + j];
        gap += dw * x[i];
        norm += dw * dw;
      }
      if (gap / std::sqrt(norm) < dist) {
        dist = gap / std::sqrt(norm);
        nearest = j;
      }
    }
    (void)nearest;
    // Keep cases whose minimal perturbation stays inside the box.
    if (dist > 0.3 || dist < 0.02) continue;
    CwConfig cfg;
    cfg.binary_search_steps = 20;
    cfg.inner_iterations = 1000;
    cfg.learning_rate = 1e-3;
    Rng arng(static_cast<std::uint64_t>(models));
    const AdversarialBatch out = cw_l2(m, xt, std::vector<int>{t}, cfg, arng);
    if (!out.success[0]) return {false, "linear model " + std::to_string(models) + ": no success"};
    worst = std::max(worst, std::abs(out.l2[0] - dist) / dist);
    ++models;
  }
  return {worst < 0.05, "linear: max |l2 - d| / d = " + fmt(100 * worst) + "% over 5 models"};
}

// 9. Byte-identical reports, bit-exact checkpoint round trip, resume.
Outcome determinism(const ExperimentConfig& desk, const std::map<std::string, TrainState>& trained,
                    const Dataset& test, const std::filesystem::path& out) {
  ExperimentConfig small = desk;
  small.dataset.train_samples = 600;
  small.dataset.test_samples = 60;
  small.models = {desk.model("vanilla_adv"), desk.model("pni_w_adv")};
  for (auto& m : small.models) m.train.epochs = 2;
  small.evaluation.trials = 2;
  small.evaluation.sweep_models = {"pni_w_adv"};
  small.evaluation.epsilon_grid = {0.0, 0.1};
  small.evaluation.step_grid = {1, 7};
  small.evaluation.checklist_model = "pni_w_adv";
  small.evaluation.checklist_source = "vanilla_adv";
  small.evaluation.checklist_epsilon_grid = {0.0, 0.1};
  small.evaluation.transfer = {{"vanilla_adv", "pni_w_adv"}};
  small.evaluation.cw_models = {"vanilla_adv"};
  small.evaluation.cw_samples = 5;
  small.evaluation.zoo_models = {"pni_w_adv"};
  small.evaluation.zoo_samples = 5;
  small.evaluation.zoo.iterations = 3;
  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  };
  std::string reports[2];
  for (int run = 0; run < 2; ++run) {
    small.output_dir = out / ("determinism_" + std::to_string(run));
    std::filesystem::remove_all(small.output_dir);
    run_experiment(small);
    reports[run] = read(small.output_dir / "report.jsonl");
  }
  const bool same_report = !reports[0].empty() && reports[0] == reports[1];

  bool exact_logits = true;
  for (const auto& [name, state] : trained) {
    const TrainState back = deserialize_checkpoint(serialize_checkpoint(state));
    NoiseContext a = NoiseContext::off(), b = NoiseContext::off();
    const Tensor x = test.all_inputs();
    const auto za = state.model.forward(x, a).data(), zb = back.model.forward(x, b).data();
    exact_logits = exact_logits && std::equal(za.begin(), za.end(), zb.begin(), zb.end());
  }

  const Datasets data = load_datasets(small.dataset, small.seed);
  const ModelEntry& e = small.model("pni_w_adv");
  TrainConfig tc = e.train;
  tc.epochs = 3;
  tc.lr.decay_epochs = {2};
  TrainState full = TrainState::fresh(Model::create(e.spec, 9), tc.seed);
  train(full, data.train, tc);
  TrainConfig first = tc;
  first.epochs = 1;
  TrainState part = TrainState::fresh(Model::create(e.spec, 9), tc.seed);
  train(part, data.train, first);
  const auto ckpt = out / "resume.ckpt";
  save_checkpoint(part, ckpt);
  TrainState resumed = load_checkpoint(ckpt);
  train(resumed, data.train, tc);
  const bool same_resume = serialize_checkpoint(resumed) == serialize_checkpoint(full);

  return {9, "determinism and persistence", same_report && exact_logits && same_resume,
          std::string("reports ") + (same_report ? "identical" : "DIFFER") + ", checkpoint logits " +
              (exact_logits ? "bit-exact" : "DIFFER") + ", resume " + (same_resume ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: acceptance <config.json> <output-dir> [--allow-fail N]...\n";
    return 2;
  }
  std::set<int> allowed;
  for (int i = 3; i + 1 < argc; i += 2) {
    if (std::string(argv[i]) == "--allow-fail") allowed.insert(std::stoi(argv[i + 1]));
  }
  try {
    ExperimentConfig cfg = load_experiment_config(argv[1]);
    cfg.output_dir = argv[2];
    std::filesystem::remove_all(cfg.output_dir);
    std::filesystem::create_directories(cfg.output_dir);
    std::vector<Outcome> outcomes;
    auto report = [&](const Outcome& o) {
      const bool waived = !o.passed && allowed.contains(o.id);
      std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << o.id << ": " << o.name << " | " << o.detail
                << (waived ? " (allowed to fail)" : "") << std::endl;
      outcomes.push_back(o);
    };

    report(gradient_correctness());

    // Train the four desk models, timing each.
    const Datasets data = load_datasets(cfg.dataset, cfg.seed);
    std::map<std::string, TrainState> models;
    std::map<std::string, double> train_secs;
    for (const auto& m : cfg.models) {
      const auto t0 = Clock::now();
      auto one = train_models(cfg, data, m.name, [](const std::string& s) { std::cerr << "  " << s << '\n'; });
      train_secs[m.name] = seconds_since(t0);
      models.emplace(m.name, std::move(one.at(m.name)));
    }
    const Model& undefended = models.at("undefended").model;
    const Model& clean_pni = models.at("pni_w_clean").model;
    const Model& vanilla = models.at("vanilla_adv").model;
    const Model& pni = models.at("pni_w_adv").model;

    EvalOptions eo;
    eo.trials = cfg.evaluation.trials;
    eo.noise_at_test = cfg.evaluation.noise_at_test;
    eo.chunk = cfg.evaluation.chunk;
    eo.threads = cfg.threads;
    eo.seed = cfg.seed;
    const Dataset& test = data.test;

    {
      const double v = max_abs_alpha(clean_pni), a = max_abs_alpha(pni);
      const auto& cs = pni.coefficients();
      double front = 0.0, back = 0.0;
      const std::size_t half = cs.size() / 2;
      for (std::size_t i = 0; i < cs.size(); ++i) (i < half ? front : back) += std::abs(cs[i].value());
      front /= static_cast<double>(half);
      back /= static_cast<double>(cs.size() - half);
      std::string per_layer;
      for (const auto& c : cs) per_layer += " " + c.layer_id + "=" + fmt(c.value(), 3);
      const double secs = train_secs["pni_w_clean"] + train_secs["pni_w_adv"];
      report({2, "alpha dichotomy", v < 0.02 && a >= 3 * v && front >= back && secs < 1200,
              "vanilla-trained max|alpha| " + fmt(v, 4) + ", adv-trained max|alpha| " + fmt(a, 4) +
                  ", front/back mean|alpha| " + fmt(front, 3) + "/" + fmt(back, 3) + ", adv:" + per_layer + ", " +
                  fmt(secs, 0) + " s"});
    }

    AttackConfig pgd_cfg = cfg.attack;
    const auto t3 = Clock::now();
    const MeanStd pni_pgd = eval_accuracy(pni, test, AttackKind::Pgd, pgd_cfg, eo);
    const MeanStd van_pgd = eval_accuracy(vanilla, test, AttackKind::Pgd, pgd_cfg, eo);
    const MeanStd und_pgd = eval_accuracy(undefended, test, AttackKind::Pgd, pgd_cfg, eo);
    const MeanStd pni_clean = eval_accuracy(pni, test, AttackKind::None, pgd_cfg, eo);
    const MeanStd van_clean = eval_accuracy(vanilla, test, AttackKind::None, pgd_cfg, eo);
    {
      const double secs = seconds_since(t3) + train_secs["undefended"] + train_secs["vanilla_adv"] +
                          train_secs["pni_w_adv"];
      const bool ok = pni_pgd.mean - van_pgd.mean >= 2.0 && van_pgd.mean - und_pgd.mean >= 20.0 &&
                      pni_clean.mean >= van_clean.mean - 1.0 && secs < 2700;
      report({3, "robustness ordering", ok,
              "PGD: pni " + fmt(pni_pgd.mean) + "+-" + fmt(pni_pgd.std) + ", vanilla " + fmt(van_pgd.mean) + "+-" +
                  fmt(van_pgd.std) + ", none " + fmt(und_pgd.mean) + "; clean: pni " + fmt(pni_clean.mean) +
                  ", vanilla " + fmt(van_clean.mean) + "; " + fmt(secs, 0) + " s"});
    }
    report({4, "no-defense collapse", und_pgd.mean < 5.0, "undefended PGD accuracy " + fmt(und_pgd.mean) + "%"});

    {
      ChecklistOptions co;
      co.pgd = pgd_cfg;
      co.epsilon_grid = cfg.evaluation.checklist_epsilon_grid;
      const ChecklistReport r = obfuscation_checklist(pni, undefended, test, co, eo);
      std::string items;
      for (const auto& i : r.items) items += " " + std::to_string(i.id) + (i.passed ? "=pass" : "=FAIL");
      std::ofstream(cfg.output_dir / "checklist.json") << to_json(r).dump(2) << '\n';
      report({5, "obfuscation checklist", r.all_passed(), "items" + items});
    }

    {
      const Curve cv = sweep(vanilla, test, "n_step", {40, 100}, pgd_cfg, eo);
      const Curve cp = sweep(pni, test, "n_step", {40, 100}, pgd_cfg, eo);
      const double dv = std::abs(cv.points[0].accuracy.mean - cv.points[1].accuracy.mean);
      const double dp = std::abs(cp.points[0].accuracy.mean - cp.points[1].accuracy.mean);
      const bool ok = dv < 2.0 && dp < 2.0 && cp.points[1].accuracy.mean > cv.points[1].accuracy.mean;
      report({6, "step saturation", ok,
              "vanilla 40/100 " + fmt(cv.points[0].accuracy.mean) + "/" + fmt(cv.points[1].accuracy.mean) +
                  ", pni 40/100 " + fmt(cp.points[0].accuracy.mean) + "/" + fmt(cp.points[1].accuracy.mean)});
    }

    {
      const auto [linear_ok, linear_detail] = cw_linear_oracle();
      EvalOptions one = eo;
      one.trials = 1;
      const Dataset sub = test.slice(0, std::min<std::size_t>(cfg.evaluation.cw_samples, test.size()));
      const CwSummary cu = eval_cw(undefended, sub, cfg.evaluation.cw, one);
      const CwSummary ca = eval_cw(vanilla, sub, cfg.evaluation.cw, one);
      const CwSummary cp = eval_cw(pni, sub, cfg.evaluation.cw, one);
      const bool ok = linear_ok && cu.success_rate == 100.0 && sub.size() == 200 && ca.mean_l2 > cu.mean_l2;
      report({7, "C&W oracle", ok,
              linear_detail + "; undefended success " + fmt(cu.success_rate) + "% over " + std::to_string(cu.samples) +
                  ", mean L2 undefended " + fmt(cu.mean_l2, 3) + " vs adv-trained " + fmt(ca.mean_l2, 3) +
                  " (pni " + fmt(cp.mean_l2, 3) + " at " + fmt(cp.success_rate) + "% success)"});
    }

    {
      EvalOptions one = eo;
      one.trials = 1;
      const Dataset sub = test.slice(0, std::min<std::size_t>(cfg.evaluation.zoo_samples, test.size()));
      const ZooSummary zv = eval_zoo(vanilla, sub, cfg.evaluation.zoo, one);
      const ZooSummary zp = eval_zoo(pni, sub, cfg.evaluation.zoo, one);
      report({8, "ZOO direction", zp.success_rate < zv.success_rate && sub.size() == 200,
              "success vanilla " + fmt(zv.success_rate) + "%, pni " + fmt(zp.success_rate) + "% over " +
                  std::to_string(zv.samples)});
    }

    report(determinism(cfg, models, test, cfg.output_dir));

    ojson summary = ojson::array();
    int failures = 0;
    for (const auto& o : outcomes) {
      summary.push_back({{"criterion", o.id}, {"name", o.name}, {"passed", o.passed}, {"detail", o.detail}});
      if (!o.passed && !allowed.contains(o.id)) ++failures;
    }
    std::ofstream(cfg.output_dir / "acceptance.json") << summary.dump(2) << '\n';
    std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criteria failed" : "acceptance: all required criteria passed")
              << std::endl;
    return failures ? 1 : 0;
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << '\n';
    return 2;
  }
}
