#include "pni/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <json.hpp>

#include "pni/error.hpp"
#include "pni/ops.hpp"

namespace pni {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

NoiseContext attack_noise(const Model& model, bool noisy, Rng& rng) {
  return noisy && model.has_noise() ? NoiseContext::sampling(rng.derive(rng.next_u64())) : NoiseContext::off();
}

std::size_t sample_size(const Tensor& x) {
  if (x.dim() < 2) throw DimensionError("attack input must be batched, got " + to_string(x.shape()));
  return x.numel() / x.shape()[0];
}

void check_labels(const Tensor& x, std::span<const int> labels) {
  if (labels.size() != x.shape()[0]) {
    throw DimensionError(std::to_string(labels.size()) + " labels for a batch of " + std::to_string(x.shape()[0]));
  }
}

AdversarialBatch finish(const Model& model, const Tensor& x, const Tensor& x_adv, std::span<const int> labels,
                        NoiseContext& noise) {
  AdversarialBatch out;
  out.x = x;
  out.x_adv = x_adv;
  out.labels.assign(labels.begin(), labels.end());
  const auto pred = argmax_rows(model.forward(x_adv, noise, {.parameter_grads = false}));
  const std::size_t d = sample_size(x);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.success.push_back(pred[i] != labels[i]);
    double l2 = 0.0, linf = 0.0;
    for (std::size_t j = i * d; j < (i + 1) * d; ++j) {
      const double delta = x_adv.at(j) - x.at(j);
      l2 += delta * delta;
      linf = std::max(linf, std::abs(delta));
    }
    out.l2.push_back(std::sqrt(l2));
    out.linf.push_back(linf);
    out.queries.push_back(0);
  }
  return out;
}

void check_inputs_in_range(const Tensor& x, double lo, double hi) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x.at(i) < lo || x.at(i) > hi) {
      throw ContractError("input element " + std::to_string(i) + " = " + std::to_string(x.at(i)) +
                          " lies outside the clip range");
    }
  }
}

struct Adam {
  std::vector<double> m, v;
  std::vector<std::size_t> t;
  double lr;

  Adam(std::size_t n, double lr) : m(n, 0.0), v(n, 0.0), t(n, 0), lr(lr) {}

  double step(std::size_t i, double g) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t[i];
    m[i] = b1 * m[i] + (1 - b1) * g;
    v[i] = b2 * v[i] + (1 - b2) * g * g;
    const double mh = m[i] / (1 - std::pow(b1, static_cast<double>(t[i])));
    const double vh = v[i] / (1 - std::pow(b2, static_cast<double>(t[i])));
    return lr * mh / (std::sqrt(vh) + eps);
  }
};

double row_margin(std::span<const double> z, int label, double k) {
  double other = -kInf;
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (static_cast<int>(j) != label) other = std::max(other, z[j]);
  }
  return std::max(z[static_cast<std::size_t>(label)] - other, -k);
}

}  // namespace

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("must be >= 0", "epsilon");
  if (n_step == 0) throw ConfigError("must be a positive integer", "n_step");
  if (n_step > 1 && !(step_size > 0.0)) throw ConfigError("must be > 0 for multi-step attacks", "step_size");
  if (!(clip_lo < clip_hi)) throw ConfigError("lower bound must be below upper bound", "clip_range");
}

void CwConfig::validate() const {
  if (!(initial_c > 0.0)) throw ConfigError("must be > 0", "initial_c");
  if (!(confidence_k >= 0.0)) throw ConfigError("must be >= 0", "confidence_k");
  if (binary_search_steps == 0) throw ConfigError("must be > 0", "binary_search_steps");
  if (inner_iterations == 0) throw ConfigError("must be > 0", "inner_iterations");
  if (!(learning_rate > 0.0)) throw ConfigError("must be > 0", "learning_rate");
}

void ZooConfig::validate() const {
  if (coordinate_batch == 0) throw ConfigError("must be > 0", "coordinate_batch");
  if (!(h > 0.0)) throw ConfigError("must be > 0", "h");
  if (!(learning_rate > 0.0)) throw ConfigError("must be > 0", "learning_rate");
  if (!(c > 0.0)) throw ConfigError("must be > 0", "c");
  if (!(confidence_k >= 0.0)) throw ConfigError("must be >= 0", "confidence_k");
  if (!(clip_lo < clip_hi)) throw ConfigError("lower bound must be below upper bound", "clip_range");
}

double AdversarialBatch::success_rate() const {
  if (success.empty()) return 0.0;
  return static_cast<double>(std::count(success.begin(), success.end(), true)) / static_cast<double>(success.size());
}

std::vector<int> predict_label(const Model& model, const Tensor& x, bool noisy, Rng& rng) {
  NoiseContext noise = attack_noise(model, noisy, rng);
  return argmax_rows(model.forward(x, noise, {.parameter_grads = false}));
}

std::vector<int> predict_label(const Model& model, const Tensor& x) {
  NoiseContext off = NoiseContext::off();
  return argmax_rows(model.forward(x, off, {.parameter_grads = false}));
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::vector<double> input_gradient(const Model& model, const Tensor& x, std::span<const int> labels,
                                   NoiseContext& noise) {
  Tensor leaf = x.detach(true);
  const Tensor logits = model.forward(leaf, noise, {.parameter_grads = false});
  const std::size_t k = logits.shape()[1];
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    if (!std::isfinite(logits.at(i))) throw AttackError("non-finite logits", i / k);
  }
  backward(softmax_cross_entropy(logits, labels));
  std::vector<double> g(leaf.grad().begin(), leaf.grad().end());
  const std::size_t d = sample_size(x);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) throw AttackError("non-finite input gradient", i / d);
  }
  return g;
}

AdversarialBatch fgsm(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& config,
                      Rng& rng) {
  config.validate();
  check_labels(x, labels);
  check_inputs_in_range(x, config.clip_lo, config.clip_hi);
  NoiseContext noise = attack_noise(model, config.with_pni_in_generation, rng);
  const auto g = input_gradient(model, x, labels, noise);
  std::vector<double> adv(x.numel());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    adv[i] = std::clamp(x.at(i) + config.epsilon * sign(g[i]), config.clip_lo, config.clip_hi);
  }
  return finish(model, x, Tensor(x.shape(), std::move(adv)), labels, noise);
}

AdversarialBatch pgd(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& config,
                     Rng& rng) {
  config.validate();
  check_labels(x, labels);
  check_inputs_in_range(x, config.clip_lo, config.clip_hi);
  NoiseContext noise = attack_noise(model, config.with_pni_in_generation, rng);

  const std::size_t n = x.numel();
  std::vector<double> lo(n), hi(n);
  for (std::size_t i = 0; i < n; ++i) {
    lo[i] = std::max(config.clip_lo, x.at(i) - config.epsilon);
    hi[i] = std::min(config.clip_hi, x.at(i) + config.epsilon);
  }
  std::vector<double> adv(x.data().begin(), x.data().end());
  if (config.random_start) {
    Rng start = rng.derive(rng.next_u64());
    for (std::size_t i = 0; i < n; ++i) {
      adv[i] = std::clamp(adv[i] + config.epsilon * (2.0 * start.uniform() - 1.0), lo[i], hi[i]);
    }
  }
  for (std::size_t step = 0; step < config.n_step; ++step) {
    const auto g = input_gradient(model, Tensor(x.shape(), adv), labels, noise);
    for (std::size_t i = 0; i < n; ++i) adv[i] = std::clamp(adv[i] + config.step_size * sign(g[i]), lo[i], hi[i]);
  }
  return finish(model, x, Tensor(x.shape(), std::move(adv)), labels, noise);
}

Tensor margin_loss(const Tensor& logits, std::span<const int> labels, double k) {
  if (logits.dim() != 2) throw DimensionError("margin_loss expects [N x K] logits, got " + to_string(logits.shape()));
  const std::size_t rows = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != rows) throw DimensionError("margin_loss: label count does not match batch");
  if (classes < 2) throw DimensionError("margin_loss needs at least two classes");
  std::vector<double> out(rows);
  std::vector<std::size_t> runner_up(rows);
  std::vector<bool> active(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = labels[r];
    if (t < 0 || static_cast<std::size_t>(t) >= classes) throw IndexError("label " + std::to_string(t) + " out of range");
    auto z = logits.data().subspan(r * classes, classes);
    std::size_t best = t == 0 ? 1 : 0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (static_cast<int>(j) != t && z[j] > z[best]) best = j;
    }
    runner_up[r] = best;
    const double m = z[static_cast<std::size_t>(t)] - z[best];
    active[r] = m > -k;
    out[r] = active[r] ? m : -k;
  }
  std::vector<int> t(labels.begin(), labels.end());
  return Tensor::from_op("margin", {rows}, std::move(out), {logits},
                         [rows, classes, t = std::move(t), runner_up, active](detail::Node& self) {
                           auto g = self.parents[0].grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r) {
                             if (!active[r]) continue;
                             g[r * classes + static_cast<std::size_t>(t[r])] += self.grad[r];
                             g[r * classes + runner_up[r]] -= self.grad[r];
                           }
                         });
}

AdversarialBatch cw_l2(const Model& model, const Tensor& x, std::span<const int> labels, const CwConfig& config,
                       Rng& rng) {
  config.validate();
  check_labels(x, labels);
  check_inputs_in_range(x, 0.0, 1.0);
  NoiseContext noise = attack_noise(model, config.with_pni_in_generation, rng);

  const std::size_t rows = x.shape()[0], d = sample_size(x), n = x.numel();
  const auto clean_pred = argmax_rows(model.forward(x, noise, {.parameter_grads = false}));

  std::vector<bool> done(rows);
  for (std::size_t r = 0; r < rows; ++r) done[r] = clean_pred[r] != labels[r];

  std::vector<double> c(rows, config.initial_c), c_lo(rows, 0.0), c_hi(rows, kInf);
  std::vector<double> best_l2(rows, kInf), best_margin(rows, kInf);
  std::vector<double> best(x.data().begin(), x.data().end()), fallback = best;
  std::vector<double> w0(n);
  for (std::size_t i = 0; i < n; ++i) w0[i] = std::atanh((2.0 * x.at(i) - 1.0) * 0.999999);
  const std::vector<double> half(n, 0.5);

  for (std::size_t search = 0; search < config.binary_search_steps; ++search) {
    std::vector<double> w = w0;
    Adam adam(n, config.learning_rate);
    std::vector<bool> hit(rows, false);
    for (std::size_t it = 0; it <= config.inner_iterations; ++it) {
      Tensor wl(x.shape(), w, true);
      Tensor xa = add_constant(scale(tanh(wl), 0.5), half);
      Tensor logits = model.forward(xa, noise, {.parameter_grads = false});
      Tensor margin = margin_loss(logits, labels, config.confidence_k);
      Tensor dist = row_sum(square(sub(xa, x)));
      const auto pred = argmax_rows(logits);
      for (std::size_t r = 0; r < rows; ++r) {
        if (done[r]) continue;
        auto row = xa.data().subspan(r * d, d);
        if (pred[r] != labels[r]) {
          hit[r] = true;
          const double l2 = std::sqrt(dist.at(r));
          if (l2 < best_l2[r]) {
            best_l2[r] = l2;
            std::copy(row.begin(), row.end(), best.begin() + static_cast<std::ptrdiff_t>(r * d));
          }
        } else if (best_l2[r] == kInf && margin.at(r) < best_margin[r]) {
          best_margin[r] = margin.at(r);
          std::copy(row.begin(), row.end(), fallback.begin() + static_cast<std::ptrdiff_t>(r * d));
        }
      }
      if (it == config.inner_iterations) break;
      backward(sum(add(dist, mul(margin, Tensor({rows}, c)))));
      auto g = wl.grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (done[i / d]) continue;
        if (!std::isfinite(g[i])) throw AttackError("non-finite C&W gradient", i / d);
        w[i] -= adam.step(i, g[i]);
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      if (done[r]) continue;
      if (hit[r]) {
        c_hi[r] = std::min(c_hi[r], c[r]);
        c[r] = c_lo[r] > 0.0 ? 0.5 * (c_lo[r] + c_hi[r]) : c[r] / 10.0;
      } else {
        c_lo[r] = std::max(c_lo[r], c[r]);
        c[r] = c_hi[r] < kInf ? 0.5 * (c_lo[r] + c_hi[r]) : c[r] * 10.0;
      }
    }
  }

  std::vector<double> adv(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (done[r]) continue;
    const auto& src = best_l2[r] < kInf ? best : fallback;
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * d), d, adv.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return finish(model, x, Tensor(x.shape(), std::move(adv)), labels, noise);
}

std::vector<double> zoo_coordinate_gradient(const BatchObjective& objective, const Tensor& x,
                                            std::span<const std::size_t> coords, double h) {
  if (!(h > 0.0)) throw ContractError("finite-difference step must be positive");
  if (x.dim() < 1 || x.shape()[0] != 1) throw DimensionError("zoo_coordinate_gradient expects a single [1 x ...] input");
  const std::size_t d = x.numel();
  Shape shape = x.shape();
  shape[0] = 2 * coords.size();
  std::vector<double> probes;
  probes.reserve(shape[0] * d);
  for (std::size_t c : coords) {
    if (c >= d) throw IndexError("coordinate " + std::to_string(c) + " out of range");
    for (double s : {h, -h}) {
      const std::size_t at = probes.size();
      probes.insert(probes.end(), x.data().begin(), x.data().end());
      probes[at + c] += s;
    }
  }
  if (coords.empty()) return {};
  const auto f = objective(Tensor(shape, std::move(probes)));
  std::vector<double> g(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) g[i] = (f[2 * i] - f[2 * i + 1]) / (2.0 * h);
  return g;
}

AdversarialBatch zoo_attack(const QueryFn& query, const Tensor& x, std::span<const int> labels,
                            const ZooConfig& config, Rng& rng) {
  config.validate();
  check_labels(x, labels);
  check_inputs_in_range(x, config.clip_lo, config.clip_hi);
  const std::size_t rows = x.shape()[0], d = sample_size(x);
  Shape one = x.shape();
  one[0] = 1;

  AdversarialBatch out;
  out.x = x;
  out.labels.assign(labels.begin(), labels.end());
  std::vector<double> adv(x.data().begin(), x.data().end());

  for (std::size_t r = 0; r < rows; ++r) {
    const int t = labels[r];
    const auto x0 = x.data().subspan(r * d, d);
    std::vector<double> cur(x0.begin(), x0.end());
    std::size_t queries = 0;
    bool success = false;

    auto scores_of = [&](const Tensor& batch) {
      Tensor s = query(batch);
      queries += batch.shape()[0];
      if (s.dim() != 2 || s.shape()[0] != batch.shape()[0]) {
        throw DimensionError("query function returned scores of shape " + to_string(s.shape()));
      }
      for (double v : s.data()) {
        if (!std::isfinite(v)) throw AttackError("query returned non-finite scores", r);
      }
      return s;
    };
    auto is_adversarial = [&](const Tensor& scores, std::size_t row) {
      const std::size_t k = scores.shape()[1];
      auto z = scores.data().subspan(row * k, k);
      return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()) != t;
    };
    BatchObjective objective = [&](const Tensor& batch) {
      const Tensor s = scores_of(batch);
      const std::size_t k = s.shape()[1];
      std::vector<double> f(batch.shape()[0]);
      for (std::size_t b = 0; b < f.size(); ++b) {
        double dist = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double delta = batch.at(b * d + j) - x0[j];
          dist += delta * delta;
        }
        f[b] = dist + config.c * row_margin(s.data().subspan(b * k, k), t, config.confidence_k);
      }
      return f;
    };

    Adam adam(d, config.learning_rate);
    std::vector<std::size_t> order(d);
    const std::size_t batch = std::min(config.coordinate_batch, d);
    for (std::size_t it = 0; it < config.iterations; ++it) {
      if (is_adversarial(scores_of(Tensor(one, cur)), 0)) {
        success = true;
        break;
      }
      std::iota(order.begin(), order.end(), 0);
      for (std::size_t i = 0; i < batch; ++i) std::swap(order[i], order[i + rng.index(d - i)]);
      const std::span<const std::size_t> coords(order.data(), batch);
      const auto g = zoo_coordinate_gradient(objective, Tensor(one, cur), coords, config.h);
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t j = coords[i];
        cur[j] = std::clamp(cur[j] - adam.step(j, g[i]), config.clip_lo, config.clip_hi);
      }
    }
    if (!success) success = is_adversarial(scores_of(Tensor(one, cur)), 0);

    double l2 = 0.0, linf = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double delta = cur[j] - x0[j];
      l2 += delta * delta;
      linf = std::max(linf, std::abs(delta));
      adv[r * d + j] = cur[j];
    }
    out.success.push_back(success);
    out.l2.push_back(std::sqrt(l2));
    out.linf.push_back(linf);
    out.queries.push_back(queries);
  }
  out.x_adv = Tensor(x.shape(), std::move(adv));
  return out;
}

QueryFn model_query(const Model& model, bool noisy, Rng& rng) {
  return [&model, noisy, &rng](const Tensor& batch) {
    if (!noisy || !model.has_noise()) {
      NoiseContext off = NoiseContext::off();
      return model.forward(batch, off, {.parameter_grads = false});
    }
    const std::size_t rows = batch.shape()[0], d = batch.numel() / rows;
    Shape one = batch.shape();
    one[0] = 1;
    NoiseContext noise = NoiseContext::sampling(rng.derive(rng.next_u64()));
    std::vector<double> scores;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> row(batch.data().begin() + static_cast<std::ptrdiff_t>(r * d),
                              batch.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
      const Tensor z = model.forward(Tensor(one, std::move(row)), noise, {.parameter_grads = false});
      scores.insert(scores.end(), z.data().begin(), z.data().end());
    }
    const std::size_t classes = scores.size() / rows;
    return Tensor({rows, classes}, std::move(scores));
  };
}

double transfer_attack(const Model& source, const Model& target, const Tensor& x, std::span<const int> labels,
                       const AttackConfig& config, bool target_noisy, Rng& rng) {
  if (source.spec().input_shape != target.spec().input_shape) {
    throw ConfigError("source expects " + to_string(source.spec().input_shape) + " inputs, target expects " +
                          to_string(target.spec().input_shape),
                      "input_shape");
  }
  if (source.spec().classes != target.spec().classes) {
    throw ConfigError("source and target disagree on the number of classes", "classes");
  }
  const AdversarialBatch crafted = pgd(source, x, labels, config, rng);
  const auto pred = predict_label(target, crafted.x_adv, target_noisy, rng);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
  return labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

void write_attack_records(std::ostream& out, const AdversarialBatch& batch, std::size_t first_index) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    nlohmann::ordered_json rec;
    rec["index"] = first_index + i;
    rec["success"] = static_cast<bool>(batch.success[i]);
    rec["linf"] = batch.linf[i];
    rec["l2"] = batch.l2[i];
    rec["queries"] = batch.queries[i];
    out << rec.dump() << '\n';
  }
}

}  // namespace pni
