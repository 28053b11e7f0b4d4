#include "pni/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "pni/error.hpp"

namespace pni {
namespace {

// Calls fn(c) for c in [0, n) on up to `threads` workers. The first
// exception is rethrown after all workers stop.
void for_each_chunk(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t c = 0; c < n; ++c) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t c = next++; c < n; c = next++) {
        try {
          fn(c);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct Chunk {
  std::size_t begin = 0, count = 0;
};

std::vector<Chunk> chunks_of(std::size_t n, std::size_t chunk) {
  std::vector<Chunk> out;
  for (std::size_t b = 0; b < n; b += chunk) out.push_back({b, std::min(chunk, n - b)});
  return out;
}

void check_options(const EvalOptions& o) {
  if (o.trials == 0) throw ConfigError("must be >= 1", "evaluation.trials");
  if (o.chunk == 0) throw ConfigError("must be >= 1", "evaluation.chunk");
}

Tensor chunk_inputs(const Dataset& data, const Chunk& c) { return data.slice(c.begin, c.count).all_inputs(); }

std::span<const int> chunk_labels(const Dataset& data, const Chunk& c) {
  return std::span<const int>(data.labels).subspan(c.begin, c.count);
}

// Correct predictions of `model` on one chunk.
std::size_t correct_in_chunk(const Model& model, const Dataset& data, const Chunk& c, AttackKind kind,
                             const AttackConfig& config, bool noisy, Rng rng) {
  const Tensor x = chunk_inputs(data, c);
  const auto labels = chunk_labels(data, c);
  if (kind == AttackKind::None) {
    const auto pred = predict_label(model, x, noisy, rng);
    std::size_t n = 0;
    for (std::size_t i = 0; i < c.count; ++i) n += pred[i] == labels[i];
    return n;
  }
  AttackConfig cfg = config;
  cfg.with_pni_in_generation = noisy;
  const AdversarialBatch out = kind == AttackKind::Fgsm ? fgsm(model, x, labels, cfg, rng) : pgd(model, x, labels, cfg, rng);
  return static_cast<std::size_t>(std::count(out.success.begin(), out.success.end(), false));
}

template <typename Fn>
MeanStd over_trials(const Dataset& data, const EvalOptions& options, Fn&& correct) {
  check_options(options);
  if (data.size() == 0) throw ConfigError("empty evaluation set", "dataset");
  const auto chunks = chunks_of(data.size(), options.chunk);
  std::vector<double> acc;
  for (std::size_t t = 0; t < options.trials; ++t) {
    const Rng trial = Rng(options.seed).derive(t);
    std::vector<std::size_t> counts(chunks.size());
    for_each_chunk(chunks.size(), options.threads,
                   [&](std::size_t c) { counts[c] = correct(chunks[c], trial.derive(c)); });
    const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
    acc.push_back(100.0 * n / static_cast<double>(data.size()));
  }
  return summarize(std::move(acc));
}

void append(AdversarialBatch& into, const AdversarialBatch& part) {
  into.labels.insert(into.labels.end(), part.labels.begin(), part.labels.end());
  into.success.insert(into.success.end(), part.success.begin(), part.success.end());
  into.l2.insert(into.l2.end(), part.l2.begin(), part.l2.end());
  into.linf.insert(into.linf.end(), part.linf.begin(), part.linf.end());
  into.queries.insert(into.queries.end(), part.queries.begin(), part.queries.end());
}

AdversarialBatch attack_chunks(const Dataset& data, const EvalOptions& options,
                               const std::function<AdversarialBatch(const Chunk&, Rng)>& attack) {
  check_options(options);
  const auto chunks = chunks_of(data.size(), options.chunk);
  std::vector<AdversarialBatch> parts(chunks.size());
  const Rng base = Rng(options.seed);
  for_each_chunk(chunks.size(), options.threads, [&](std::size_t c) { parts[c] = attack(chunks[c], base.derive(c)); });
  AdversarialBatch out;
  for (const auto& p : parts) append(out, p);
  return out;
}

}  // namespace

MeanStd summarize(std::vector<double> values) {
  MeanStd out;
  out.trials = std::move(values);
  const double n = static_cast<double>(out.trials.size());
  if (out.trials.empty()) return out;
  out.mean = std::accumulate(out.trials.begin(), out.trials.end(), 0.0) / n;
  if (out.trials.size() > 1) {
    double ss = 0.0;
    for (double v : out.trials) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / (n - 1.0));
  }
  return out;
}

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::None: return "none";
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::Pgd: return "pgd";
  }
  return "none";
}

AttackKind parse_attack_kind(const std::string& text) {
  if (text == "none" || text == "clean") return AttackKind::None;
  if (text == "fgsm") return AttackKind::Fgsm;
  if (text == "pgd") return AttackKind::Pgd;
  throw ConfigError("unknown attack '" + text + "'", "attack");
}

MeanStd eval_accuracy(const Model& model, const Dataset& data, AttackKind attack, const AttackConfig& config,
                      const EvalOptions& options) {
  return over_trials(data, options, [&](const Chunk& c, Rng rng) {
    return correct_in_chunk(model, data, c, attack, config, options.noise_at_test, rng);
  });
}

MeanStd eval_transfer(const Model& source, const Model& target, const Dataset& data, const AttackConfig& config,
                      const EvalOptions& options) {
  AttackConfig cfg = config;
  cfg.with_pni_in_generation = options.noise_at_test;
  return over_trials(data, options, [&](const Chunk& c, Rng rng) {
    const double acc = transfer_attack(source, target, chunk_inputs(data, c), chunk_labels(data, c), cfg,
                                       options.noise_at_test, rng);
    return static_cast<std::size_t>(std::lround(acc * static_cast<double>(c.count)));
  });
}

std::string Curve::to_csv() const {
  std::ostringstream s;
  s.precision(10);
  s << axis << ",mean,std\n";
  for (const auto& p : points) s << p.x << ',' << p.accuracy.mean << ',' << p.accuracy.std << '\n';
  return s.str();
}

Curve sweep(const Model& model, const Dataset& data, const std::string& axis, const std::vector<double>& grid,
            const AttackConfig& base, const EvalOptions& options) {
  if (axis != "epsilon" && axis != "n_step") throw ConfigError("axis must be 'epsilon' or 'n_step'", "sweep.axis");
  if (grid.empty()) throw ConfigError("grid is empty", "sweep.grid");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw ConfigError("grid must be strictly increasing", "sweep.grid");
  }
  Curve curve{axis, {}};
  for (double x : grid) {
    AttackConfig cfg = base;
    AttackKind kind = AttackKind::Pgd;
    if (axis == "epsilon") {
      if (x < 0.0) throw ConfigError("epsilon must be >= 0", "sweep.grid");
      const double ratio = base.epsilon > 0.0 ? base.step_size / base.epsilon : 0.25;
      cfg.epsilon = x;
      cfg.step_size = ratio * x;
      if (x == 0.0) kind = AttackKind::None;
    } else {
      if (x < 1.0 || x != std::floor(x)) throw ConfigError("step counts must be positive integers", "sweep.grid");
      cfg.n_step = static_cast<std::size_t>(x);
    }
    curve.points.push_back({x, eval_accuracy(model, data, kind, cfg, options)});
  }
  return curve;
}

bool ChecklistReport::all_passed() const {
  return std::all_of(items.begin(), items.end(), [](const ChecklistItem& i) { return i.passed; });
}

ChecklistReport obfuscation_checklist(const Model& defended, const Model& source, const Dataset& data,
                                      const ChecklistOptions& checklist, const EvalOptions& options) {
  ChecklistReport report;
  const AttackConfig& pgd_cfg = checklist.pgd;
  const MeanStd pgd_acc = eval_accuracy(defended, data, AttackKind::Pgd, pgd_cfg, options);

  AttackConfig fgsm_cfg = pgd_cfg;
  fgsm_cfg.n_step = 1;
  fgsm_cfg.step_size = pgd_cfg.epsilon;
  const MeanStd fgsm_acc = eval_accuracy(defended, data, AttackKind::Fgsm, fgsm_cfg, options);
  report.items.push_back({1, "one-step attack weaker than iterative attack", fgsm_acc.mean >= pgd_acc.mean,
                          {{"fgsm", to_json(fgsm_acc)}, {"pgd", to_json(pgd_acc)}}});

  const MeanStd transfer = eval_transfer(source, defended, data, pgd_cfg, options);
  report.items.push_back({2, "black-box transfer weaker than white-box", transfer.mean >= pgd_acc.mean,
                          {{"transfer", to_json(transfer)}, {"pgd", to_json(pgd_acc)}}});

  AttackConfig unbounded = pgd_cfg;
  unbounded.epsilon = pgd_cfg.clip_hi - pgd_cfg.clip_lo;
  unbounded.n_step = checklist.unbounded_steps;
  unbounded.step_size = unbounded.epsilon / 10.0;
  const MeanStd unbounded_acc = eval_accuracy(defended, data, AttackKind::Pgd, unbounded, options);
  const double chance = 100.0 / static_cast<double>(defended.spec().classes);
  report.items.push_back({3, "unbounded attack reaches chance accuracy", unbounded_acc.mean <= chance,
                          {{"accuracy", to_json(unbounded_acc)}, {"chance", chance}}});

  const Curve curve = sweep(defended, data, "epsilon", checklist.epsilon_grid, pgd_cfg, options);
  bool increasing = curve.points.size() >= 2;
  bool monotone = true;
  nlohmann::ordered_json success = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    success.push_back(100.0 - curve.points[i].accuracy.mean);
    if (i == 0) continue;
    const auto& prev = curve.points[i - 1].accuracy;
    const auto& cur = curve.points[i].accuracy;
    // Once every sample is broken the success rate cannot rise further.
    if (!(cur.mean < prev.mean) && prev.mean > 0.0) increasing = false;
    if (cur.mean > prev.mean + 2.0 * std::max(prev.std, cur.std)) monotone = false;
  }
  report.items.push_back({4, "success rate increases with the distortion bound", increasing,
                          {{"epsilon", checklist.epsilon_grid}, {"success_rate", success}}});
  report.items.push_back({5, "accuracy curve monotone within 2 std", monotone, {{"curve", to_json(curve)}}});
  return report;
}

CwSummary eval_cw(const Model& model, const Dataset& data, const CwConfig& config, const EvalOptions& options) {
  CwConfig cfg = config;
  cfg.with_pni_in_generation = options.noise_at_test;
  CwSummary out;
  out.batch = attack_chunks(data, options, [&](const Chunk& c, Rng rng) {
    return cw_l2(model, chunk_inputs(data, c), chunk_labels(data, c), cfg, rng);
  });
  out.samples = out.batch.size();
  out.success_rate = 100.0 * out.batch.success_rate();
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < out.samples; ++i) {
    if (out.batch.success[i]) {
      sum += out.batch.l2[i];
      ++n;
    }
  }
  out.mean_l2 = n ? sum / static_cast<double>(n) : 0.0;
  return out;
}

ZooSummary eval_zoo(const Model& model, const Dataset& data, const ZooConfig& config, const EvalOptions& options) {
  ZooSummary out;
  out.batch = attack_chunks(data, options, [&](const Chunk& c, Rng rng) {
    Rng query_rng = rng.derive(1);
    return zoo_attack(model_query(model, options.noise_at_test, query_rng), chunk_inputs(data, c),
                      chunk_labels(data, c), config, rng);
  });
  out.samples = out.batch.size();
  out.success_rate = 100.0 * out.batch.success_rate();
  double q = 0.0;
  for (auto v : out.batch.queries) q += static_cast<double>(v);
  out.mean_queries = out.samples ? q / static_cast<double>(out.samples) : 0.0;
  return out;
}

nlohmann::ordered_json to_json(const MeanStd& v) {
  return {{"mean", v.mean}, {"std", v.std}, {"trials", v.trials}};
}

nlohmann::ordered_json to_json(const Curve& curve) {
  nlohmann::ordered_json points = nlohmann::ordered_json::array();
  for (const auto& p : curve.points) points.push_back({{"x", p.x}, {"mean", p.accuracy.mean}, {"std", p.accuracy.std}});
  return {{"axis", curve.axis}, {"points", points}};
}

nlohmann::ordered_json to_json(const ChecklistReport& report) {
  nlohmann::ordered_json items = nlohmann::ordered_json::array();
  for (const auto& i : report.items) {
    items.push_back({{"item", i.id}, {"name", i.name}, {"passed", i.passed}, {"measured", i.measured}});
  }
  return items;
}

}  // namespace pni
